#ifndef LLD_H
#define LLD_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Verdict of a run or an exploration.
 */
typedef enum LldOutcome {
  LLD_OUTCOME_PASS = 0,
  LLD_OUTCOME_VIOLATION = 1,
  LLD_OUTCOME_INCONCLUSIVE = 2,
} LldOutcome;

/**
 * Result of every fallible call.
 */
typedef enum LldStatus {
  LLD_STATUS_OK = 0,
  LLD_STATUS_NULL_POINTER = 1,
  LLD_STATUS_INVALID_UTF8 = 2,
  LLD_STATUS_IO = 3,
  LLD_STATUS_PARSE = 4,
  LLD_STATUS_VALIDATION = 5,
  LLD_STATUS_INVALID_ARGUMENT = 6,
  LLD_STATUS_PANIC = 7,
} LldStatus;

/**
 * The report and schedule trace of one scenario run.
 */
typedef struct LldReport LldReport;

/**
 * A parsed and validated scenario.
 */
typedef struct LldScenario LldScenario;

/**
 * Summary of an election exploration.
 */
typedef struct LldExploreResult {
  enum LldOutcome outcome;
  uint64_t states_explored;
  uint64_t transitions;
  uint64_t max_depth;
  /**
   * Handover wait that was explored.
   */
  uint64_t wait;
  /**
   * True if a counterexample was found and the simulator reproduced it.
   */
  bool replay_confirms;
} LldExploreResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next call into this library on the same thread.
 */
const char *lld_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lld_version(void);

/**
 * Parses a scenario from JSON text.
 *
 * # Safety
 * `json` must be NULL or a NUL-terminated string; `out` must be NULL or
 * valid for writing one pointer.
 */
enum LldStatus lld_scenario_parse(const char *json, struct LldScenario **out);

/**
 * Loads a scenario file.
 *
 * # Safety
 * As for [`lld_scenario_parse`], with `path` a file path.
 */
enum LldStatus lld_scenario_load(const char *path, struct LldScenario **out);

/**
 * Releases a scenario. NULL is ignored.
 *
 * # Safety
 * `scenario` must come from this library and not be used afterwards.
 */
void lld_scenario_free(struct LldScenario *scenario);

/**
 * Runs a scenario. `seed` and `limit` override the file's values when
 * non-NULL.
 *
 * # Safety
 * `scenario` must be a live handle; `seed` and `limit` NULL or readable;
 * `out` valid for writing one pointer.
 */
enum LldStatus lld_scenario_run(const struct LldScenario *scenario,
                                const uint64_t *seed,
                                const uint64_t *limit,
                                struct LldReport **out);

/**
 * Outcome of a run: pass iff every invariant held. A NULL handle reads
 * as inconclusive.
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
enum LldOutcome lld_report_outcome(const struct LldReport *report);

/**
 * True iff the run met the scenario's expectation.
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
bool lld_report_met_expectation(const struct LldReport *report);

/**
 * The report as JSON. Free with [`lld_string_free`]; NULL on a NULL handle.
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
char *lld_report_json(const struct LldReport *report);

/**
 * The schedule trace as tab-separated text. Free with [`lld_string_free`].
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
char *lld_report_trace(const struct LldReport *report);

/**
 * Releases a report. NULL is ignored.
 *
 * # Safety
 * `report` must come from this library and not be used afterwards.
 */
void lld_report_free(struct LldReport *report);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void lld_string_free(char *s);

/**
 * Exhaustively explores the local leader election. `wait` of 0 selects
 * the standard handover wait `period + 4 * epsilon`; `max_states` of 0
 * means no bound.
 *
 * # Safety
 * `out` must be valid for writing one [`LldExploreResult`].
 */
enum LldStatus lld_explore_election(uint64_t epsilon,
                                    uint64_t period,
                                    uint32_t max_instances,
                                    uint64_t wait,
                                    uint64_t max_states,
                                    struct LldExploreResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LLD_H */
