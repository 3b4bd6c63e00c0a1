#ifndef MCHOM_H
#define MCHOM_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum MchomStatus {
  MCHOM_STATUS_OK = 0,
  MCHOM_STATUS_NULL_POINTER = 1,
  MCHOM_STATUS_INVALID_ARGUMENT = 2,
  MCHOM_STATUS_INVALID_CONFIG = 3,
  MCHOM_STATUS_INVALID_INPUT = 4,
  MCHOM_STATUS_SOLVER_FAILURE = 5,
  MCHOM_STATUS_SINGULAR_SYSTEM = 6,
  MCHOM_STATUS_IO = 7,
  MCHOM_STATUS_BUFFER_TOO_SMALL = 8,
  MCHOM_STATUS_PANIC = 9,
} MchomStatus;

// Which nodal field [`mchom_run_field`] copies.
typedef enum MchomField {
  // Fine reference solution on `(n+1)²` nodes.
  MCHOM_FIELD_FINE = 0,
  // Downscaled localized solution on `(n+1)²` nodes.
  MCHOM_FIELD_NLMC = 1,
  // First macroscopic continuum on the coarse nodes.
  MCHOM_FIELD_MACRO0 = 2,
  // Second macroscopic continuum on the coarse nodes.
  MCHOM_FIELD_MACRO1 = 3,
} MchomField;

// Resolved run configuration.
typedef struct MchomConfig MchomConfig;

// Generated coefficient field with its continuum labels.
typedef struct MchomMedium MchomMedium;

// Outputs of a complete pipeline run.
typedef struct MchomRun MchomRun;

// Scalar metrics of a run. Metrics that were not computed are NaN.
typedef struct MchomReport {
  double h_eps;
  double h_coarse;
  size_t k_layers;
  double contrast;
  double nlmc_energy_error;
  double nlmc_l2_error;
  double macro_energy_error;
  double macro_l2_error;
  double mean_preservation;
  double identity_discrepancy;
  double runtime_s;
} MchomReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *mchom_last_error(void);

// Library version as a static NUL-terminated string.
const char *mchom_version(void);

// Writes a handle holding the default configuration to `out`.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum MchomStatus mchom_config_default(struct MchomConfig **out);

// Parses and validates a TOML configuration.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a valid pointer.
enum MchomStatus mchom_config_from_toml(const char *text, struct MchomConfig **out);

// Releases a configuration. Null is ignored.
//
// # Safety
// `cfg` must come from this library and not have been freed.
void mchom_config_free(struct MchomConfig *cfg);

// Generates the medium described by `cfg`.
//
// # Safety
// `cfg` must be a live configuration handle and `out` a valid pointer.
enum MchomStatus mchom_medium_generate(const struct MchomConfig *cfg, struct MchomMedium **out);

// Number of fine cells of the medium, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live medium handle.
size_t mchom_medium_num_cells(const struct MchomMedium *m);

// `κ_max / κ_min`, or NaN for a null handle.
//
// # Safety
// `m` must be null or a live medium handle.
double mchom_medium_contrast(const struct MchomMedium *m);

// Copies the per-cell coefficient (row-major, x fastest) into `out`.
//
// # Safety
// `m` must be a live medium handle; `out` must point to `len` doubles.
enum MchomStatus mchom_medium_coefficients(const struct MchomMedium *m, double *out, size_t len);

// Copies the continuum label (0 or 1) of each cell into `out`.
//
// # Safety
// `m` must be a live medium handle; `out` must point to `len` bytes.
enum MchomStatus mchom_medium_labels(const struct MchomMedium *m, uint8_t *out, size_t len);

// Releases a medium. Null is ignored.
//
// # Safety
// `m` must come from this library and not have been freed.
void mchom_medium_free(struct MchomMedium *m);

// Runs the full pipeline. `cache_dir` may be null to disable caching;
// `with_macro` nonzero also solves the macroscopic system.
//
// # Safety
// `cfg` must be a live configuration handle, `cache_dir` null or a
// NUL-terminated path, and `out` a valid pointer.
enum MchomStatus mchom_run_pipeline(const struct MchomConfig *cfg,
                                    const char *cache_dir,
                                    int with_macro,
                                    struct MchomRun **out);

// Fills `out` with the run's metrics.
//
// # Safety
// `run` must be a live run handle and `out` a valid pointer.
enum MchomStatus mchom_run_report(const struct MchomRun *run, struct MchomReport *out);

// Number of values of `field`, or 0 when the run has no such field.
//
// # Safety
// `run` must be null or a live run handle.
size_t mchom_run_field_len(const struct MchomRun *run, enum MchomField field);

// Copies a nodal field (row-major, x fastest) into `out`.
//
// # Safety
// `run` must be a live run handle; `out` must point to `len` doubles.
enum MchomStatus mchom_run_field(const struct MchomRun *run,
                                 enum MchomField field,
                                 double *out,
                                 size_t len);

// Releases a run. Null is ignored.
//
// # Safety
// `run` must come from this library and not have been freed.
void mchom_run_free(struct MchomRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MCHOM_H */
