/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef AGORA_H
#define AGORA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AgoraStatus {
  AGORA_STATUS_OK = 0,
  // A required pointer was null.
  AGORA_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not UTF-8.
  AGORA_STATUS_INVALID_UTF8 = 2,
  // An argument was out of range or refused by the operation.
  AGORA_STATUS_INVALID_ARGUMENT = 3,
  // Text input (descriptor, scenario, log) did not parse.
  AGORA_STATUS_PARSE = 4,
  // The operation ran but reported a failure, e.g. a failed assertion.
  AGORA_STATUS_DIAGNOSTIC = 5,
  // Something inside the library panicked.
  AGORA_STATUS_INTERNAL = 6,
} AgoraStatus;

// An in-memory bank. Amounts are in cents.
typedef struct AgoraBank AgoraBank;

// A finished scenario run.
typedef struct AgoraScenario AgoraScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// The message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into the library on the same thread.
const char *agora_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void agora_string_free(char *s);

// Library version as a static string.
const char *agora_version(void);

// Proportional shares of `n` bid rates, written to `shares_out[0..n]`.
//
// # Safety
// `rates` and `shares_out` must each point to `n` valid `double`s.
enum AgoraStatus agora_compute_shares(const double *rates, size_t n, double *shares_out);

// Price of a host: the sum of `n` rates over its CPU capacity.
//
// # Safety
// `rates` must point to `n` valid `double`s; `price_out` must be writable.
enum AgoraStatus agora_host_price(const double *rates,
                                  size_t n,
                                  double cpu_capacity,
                                  double *price_out);

// Smallest rate that obtains `target_share` against `competing_rate`.
//
// # Safety
// `rate_out` must be writable.
enum AgoraStatus agora_required_rate(double target_share, double competing_rate, double *rate_out);

// Creates a bank whose reserve holds `supply_cents`.
//
// # Safety
// `bank_out` must be writable.
enum AgoraStatus agora_bank_new(uint64_t supply_cents, struct AgoraBank **bank_out);

// # Safety
// `bank` must come from [`agora_bank_new`] and not have been freed. Null is ignored.
void agora_bank_free(struct AgoraBank *bank);

// Opens `account`, funded with `grant_cents` from the reserve.
//
// # Safety
// `bank` must be a live handle and `account` a NUL-terminated string.
enum AgoraStatus agora_bank_open(struct AgoraBank *bank, const char *account, uint64_t grant_cents);

// Pays a bid of `amount_cents` over `duration` seconds from `bidder` to `provider`.
//
// # Safety
// `bank` must be a live handle; `bid_id`, `bidder`, and `provider` NUL-terminated strings.
enum AgoraStatus agora_bank_settle(struct AgoraBank *bank,
                                   const char *bid_id,
                                   const char *bidder,
                                   const char *provider,
                                   uint64_t amount_cents,
                                   double duration);

// Balance of `account` in cents.
//
// # Safety
// `bank` must be a live handle, `account` NUL-terminated, `cents_out` writable.
enum AgoraStatus agora_bank_balance(struct AgoraBank *bank,
                                    const char *account,
                                    uint64_t *cents_out);

// Sum of every balance, the reserve included, in cents.
//
// # Safety
// `bank` must be a live handle and `cents_out` writable.
enum AgoraStatus agora_bank_total(struct AgoraBank *bank, uint64_t *cents_out);

// The journal as text, one entry per line.
//
// # Safety
// `bank` must be a live handle and `journal_out` writable.
enum AgoraStatus agora_bank_journal(struct AgoraBank *bank, char **journal_out);

// Canonical text of a descriptor file.
//
// # Safety
// `source` must be NUL-terminated and `text_out` writable.
enum AgoraStatus agora_descriptor_format(const char *source, char **text_out);

// The resolved `sfConfig` tree of a descriptor, in canonical text.
//
// # Safety
// `source` must be NUL-terminated and `text_out` writable.
enum AgoraStatus agora_descriptor_resolve(const char *source, char **text_out);

// Runs a scenario script. `seed` overrides the script's when `use_seed` is
// set; `base_dir` (nullable) is where `deploy` finds descriptor files.
// A run whose assertions fail still yields a handle and returns
// `Diagnostic`.
//
// # Safety
// `source` must be NUL-terminated, `base_dir` null or NUL-terminated, and
// `scenario_out` writable.
enum AgoraStatus agora_scenario_run(const char *source,
                                    bool use_seed,
                                    uint64_t seed,
                                    const char *base_dir,
                                    struct AgoraScenario **scenario_out);

// # Safety
// `scenario` must come from [`agora_scenario_run`] and not have been freed. Null is ignored.
void agora_scenario_free(struct AgoraScenario *scenario);

// The human-readable report of a run.
//
// # Safety
// `scenario` must be a live handle and `text_out` writable.
enum AgoraStatus agora_scenario_report(const struct AgoraScenario *scenario, char **text_out);

// The run's message log, one JSON envelope per line.
//
// # Safety
// `scenario` must be a live handle and `text_out` writable.
enum AgoraStatus agora_scenario_log(const struct AgoraScenario *scenario, char **text_out);

// Rebuilds the report from a message log alone.
//
// # Safety
// `log` must be NUL-terminated and `text_out` writable.
enum AgoraStatus agora_report_from_log(const char *log, char **text_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AGORA_H */
