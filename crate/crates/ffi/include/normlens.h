#ifndef NORMLENS_H
#define NORMLENS_H

/* Generated by cbindgen from the normlens-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum NlStatus {
  // Success.
  NL_STATUS_OK = 0,
  // A required pointer argument was null.
  NL_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  NL_STATUS_INVALID_UTF8 = 2,
  // The filesystem refused a read or write.
  NL_STATUS_IO = 3,
  // Input could not be decoded (malformed JSONL, bad labels, bad store).
  NL_STATUS_PARSE = 4,
  // Inputs were well-formed but unusable (empty dataset, missing run).
  NL_STATUS_INVALID = 5,
  // Judge text carried no readable answer.
  NL_STATUS_UNPARSEABLE = 6,
  // A defect inside the library; details in the error message.
  NL_STATUS_INTERNAL = 7,
} NlStatus;

// Which answer shape `nl_judge_parse` should extract.
typedef enum NlExpectedShape {
  // A list of norm ids.
  NL_EXPECTED_SHAPE_NORM_LIST = 0,
  // A True/False verdict plus the ids backing it.
  NL_EXPECTED_SHAPE_BOOLEAN_PLUS_LIST = 1,
} NlExpectedShape;

// An owned list of norms behind an opaque pointer.
typedef struct NlNorms NlNorms;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string; never freed by the caller.
const char *nl_version(void);

// Message from the most recent failing call on this thread; empty before
// any failure. Owned by the library, valid until the next failing call.
const char *nl_last_error_message(void);

// Releases a string returned by this library. Null is ignored.
void nl_string_free(char *s);

// Loads norms from a canonical JSONL file into a new handle. Rows that fail
// validation are skipped, matching the batch loader; an entirely invalid
// file is an error.
enum NlStatus nl_norms_load_jsonl(const char *path, struct NlNorms **out);

// Number of norms in the handle; zero for null.
size_t nl_norms_len(const struct NlNorms *norms);

// Copies the norms whose cultural context matches `country`
// (case-insensitively) into a fresh handle. An empty result is valid.
enum NlStatus nl_norms_filter_country(const struct NlNorms *norms,
                                      const char *country,
                                      struct NlNorms **out);

// Serializes the handle's norms to canonical JSONL, one record per line.
enum NlStatus nl_norms_to_jsonl(const struct NlNorms *norms, char **out);

// Releases a norms handle. Null is ignored.
void nl_norms_free(struct NlNorms *norms);

// Expands every norm in the handle into its full prompt matrix using the
// built-in templates, returning the prompts as JSONL.
enum NlStatus nl_prompts_generate_jsonl(const struct NlNorms *norms, char **out);

// Parses raw judge output against the expected shape. `valid_ids_json` is a
// JSON array of id strings; the result is a JSON object with `verdict`,
// `ids`, `unmatched`, and `flags` fields. Text carrying no readable answer
// yields `NL_STATUS_UNPARSEABLE`.
enum NlStatus nl_judge_parse(const char *raw,
                             enum NlExpectedShape expected,
                             const char *valid_ids_json,
                             char **out);

// Renders the model-by-context violation-rate table for a finished run
// directory as CSV. Control (norm-irrelevant) verdicts are excluded, as in
// the headline report artifacts.
enum NlStatus nl_report_table2(const char *run_dir, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NORMLENS_H */
