#ifndef ILWS_FORGE_H
#define ILWS_FORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum IlwsStatus {
  ILWS_STATUS_OK = 0,
  ILWS_STATUS_NULL_ARGUMENT = 1,
  ILWS_STATUS_INVALID_UTF8 = 2,
  ILWS_STATUS_INVALID_ARGUMENT = 3,
  ILWS_STATUS_NOT_FOUND = 4,
  ILWS_STATUS_CONFLICT = 5,
  ILWS_STATUS_STORAGE = 6,
  ILWS_STATUS_INTERNAL = 7,
  ILWS_STATUS_PANIC = 8,
} IlwsStatus;

typedef enum IlwsTest {
  ILWS_TEST_WELCH = 0,
  ILWS_TEST_MANN_WHITNEY = 1,
} IlwsTest;

/**
 * Opaque engine handle.
 */
typedef struct IlwsEngine IlwsEngine;

/**
 * Outcome of one gate evaluation.
 */
typedef struct IlwsGateResult {
  bool accepted;
  enum IlwsTest test;
  double mean_prev;
  double mean_new;
  double statistic;
  double p_value;
} IlwsGateResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version; a static string, not to be freed.
 */
const char *ilws_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on this thread.
 */
const char *ilws_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void ilws_string_free(char *s);

/**
 * Creates an in-memory engine with the mock reflection engine and a tool
 * runner that passes every test. `genesis_json` may be null for an empty
 * state.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum IlwsStatus ilws_engine_new(const char *config_json,
                                const char *genesis_json,
                                int64_t at_ms,
                                struct IlwsEngine **out);

/**
 * Opens the durable engine described by a service TOML file, restoring it
 * from its event log when one exists.
 *
 * # Safety
 * `config_path` must be NUL-terminated; `out` must be writable.
 */
enum IlwsStatus ilws_engine_open(const char *config_path, int64_t at_ms, struct IlwsEngine **out);

/**
 * # Safety
 * `h` must be null or a handle from this library, freed once.
 */
void ilws_engine_free(struct IlwsEngine *h);

/**
 * Plans a session: the prompt to serve it with and the commit it runs
 * under. `ephemeral` may be null.
 *
 * # Safety
 * `h` must be a live handle; strings NUL-terminated; `out_json` writable.
 */
enum IlwsStatus ilws_engine_prepare_session(struct IlwsEngine *h,
                                            const char *ephemeral,
                                            char **out_json);

/**
 * Records a served session (a `SessionInput` JSON object) and returns the
 * stored session record.
 *
 * # Safety
 * As for [`ilws_engine_prepare_session`].
 */
enum IlwsStatus ilws_engine_record_session(struct IlwsEngine *h,
                                           const char *session_json,
                                           int64_t at_ms,
                                           char **out_json);

/**
 * Rates a session and runs the work it scheduled (reflection, gate
 * evaluation) before returning.
 *
 * # Safety
 * As for [`ilws_engine_prepare_session`].
 */
enum IlwsStatus ilws_engine_rate(struct IlwsEngine *h,
                                 const char *session_id,
                                 int64_t rating,
                                 const char *submitter,
                                 int64_t at_ms,
                                 char **out_json);

/**
 * # Safety
 * As for [`ilws_engine_prepare_session`].
 */
enum IlwsStatus ilws_engine_veto(struct IlwsEngine *h,
                                 const char *candidate_id,
                                 const char *actor,
                                 int64_t at_ms,
                                 char **out_json);

/**
 * Reverts the serving state to a commit id or tag.
 *
 * # Safety
 * As for [`ilws_engine_prepare_session`].
 */
enum IlwsStatus ilws_engine_revert(struct IlwsEngine *h,
                                   const char *reference,
                                   const char *actor,
                                   int64_t at_ms,
                                   char **out_json);

/**
 * Settles expired veto windows and checks the distillation trigger.
 * `out_changed` (may be null) receives whether anything changed.
 *
 * # Safety
 * `h` must be a live handle.
 */
enum IlwsStatus ilws_engine_tick(struct IlwsEngine *h, int64_t at_ms, bool *out_changed);

/**
 * Read-only view of the engine: serving state, candidates, decisions,
 * budget, metrics and trace fingerprint.
 *
 * # Safety
 * As for [`ilws_engine_prepare_session`].
 */
enum IlwsStatus ilws_engine_snapshot(struct IlwsEngine *h, char **out_json);

/**
 * Evaluates the acceptance gate on two rating windows (values 1..=5).
 *
 * # Safety
 * `prev` and `new` must point to `n_prev` and `n_new` bytes; `out` must be
 * writable.
 */
enum IlwsStatus ilws_gate_evaluate(const uint8_t *prev,
                                   size_t n_prev,
                                   const uint8_t *new_,
                                   size_t n_new,
                                   double tau,
                                   double alpha,
                                   struct IlwsGateResult *out);

/**
 * Runs a simulation scenario given as TOML and returns its report.
 *
 * # Safety
 * `scenario_toml` must be NUL-terminated; `out_json` writable.
 */
enum IlwsStatus ilws_sim_run(const char *scenario_toml, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ILWS_FORGE_H */
