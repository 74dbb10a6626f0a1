#ifndef THERMOEIT_H
#define THERMOEIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every exported function.
 */
typedef enum {
  THERMOEIT_STATUS_OK = 0,
  THERMOEIT_STATUS_NULL_POINTER = 1,
  THERMOEIT_STATUS_INVALID_INPUT = 2,
  THERMOEIT_STATUS_CONFIG = 3,
  THERMOEIT_STATUS_SOLVER = 4,
  THERMOEIT_STATUS_IDENTIFICATION = 5,
  THERMOEIT_STATUS_IO = 6,
  THERMOEIT_STATUS_BUFFER_TOO_SMALL = 7,
  THERMOEIT_STATUS_PANIC = 8,
} ThermoeitStatus;

/**
 * Time envelope selector for heat runs.
 */
typedef enum {
  THERMOEIT_ENVELOPE_RAMP = 0,
  THERMOEIT_ENVELOPE_IMPULSE = 1,
} ThermoeitEnvelope;

/**
 * Parsed experiment configuration.
 */
typedef struct ThermoeitConfig ThermoeitConfig;

/**
 * Meshed forward model with sampled coefficients.
 */
typedef struct ThermoeitModel ThermoeitModel;

/**
 * Boundary heat-flux trace: `times x channels` samples.
 */
typedef struct ThermoeitTrace ThermoeitTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *thermoeit_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next call into the library on the same thread.
 */
const char *thermoeit_last_error(void);

/**
 * Parses a TOML experiment. Relative expression files resolve against the
 * working directory. A NULL `toml` yields the built-in default experiment.
 *
 * # Safety
 * `toml` must be NULL or a NUL-terminated string; `out` must be writable.
 */
ThermoeitStatus thermoeit_config_parse(const char *toml, ThermoeitConfig **out);

/**
 * Copies the configuration digest (hex, NUL-terminated) into `buf`.
 *
 * # Safety
 * `config` must come from [`thermoeit_config_parse`]; `buf` must hold `len` bytes.
 */
ThermoeitStatus thermoeit_config_digest(const ThermoeitConfig *config, char *buf, size_t len);

/**
 * # Safety
 * `config` must be NULL or come from [`thermoeit_config_parse`], freed once.
 */
void thermoeit_config_free(ThermoeitConfig *config);

/**
 * Builds the mesh and assembles the forward model of a configuration.
 *
 * # Safety
 * `config` must come from [`thermoeit_config_parse`]; `out` must be writable.
 */
ThermoeitStatus thermoeit_model_new(const ThermoeitConfig *config, ThermoeitModel **out);

/**
 * # Safety
 * `model` must be NULL or come from [`thermoeit_model_new`], freed once.
 */
void thermoeit_model_free(ThermoeitModel *model);

/**
 * Number of boundary nodes, the length of every boundary trace.
 *
 * # Safety
 * `model` must come from [`thermoeit_model_new`]; `out` must be writable.
 */
ThermoeitStatus thermoeit_model_boundary_count(const ThermoeitModel *model, size_t *out);

/**
 * Coordinates of the boundary nodes as `count x 3` row-major values.
 *
 * # Safety
 * `out` must hold `capacity` doubles; `written` may be NULL.
 */
ThermoeitStatus thermoeit_model_boundary_points(const ThermoeitModel *model,
                                                double *out,
                                                size_t capacity,
                                                size_t *written);

/**
 * Lowest Dirichlet eigenvalues of the heat operator, in ascending order.
 *
 * # Safety
 * `out` must hold `capacity` doubles; `written` may be NULL.
 */
ThermoeitStatus thermoeit_model_eigenvalues(const ThermoeitModel *model,
                                            double *out,
                                            size_t capacity,
                                            size_t *written);

/**
 * Dirichlet energy ⟨Λh, h⟩ of the conductivity problem for a boundary trace.
 *
 * # Safety
 * `h` must hold `len` doubles; `out` must be writable.
 */
ThermoeitStatus thermoeit_model_dtn_energy(const ThermoeitModel *model,
                                           const double *h,
                                           size_t len,
                                           double *out);

/**
 * Boundary heat flux generated by the Joule power of the boundary voltage `h`.
 *
 * # Safety
 * `h` must hold `len` doubles; `out` must be writable.
 */
ThermoeitStatus thermoeit_model_flux(const ThermoeitModel *model,
                                     const double *h,
                                     size_t len,
                                     ThermoeitEnvelope envelope,
                                     double t_end,
                                     double dt,
                                     ThermoeitTrace **out);

/**
 * Dimensions of a trace: number of time samples and of boundary channels.
 *
 * # Safety
 * `trace` must come from [`thermoeit_model_flux`]; outputs must be writable.
 */
ThermoeitStatus thermoeit_trace_shape(const ThermoeitTrace *trace, size_t *times, size_t *channels);

/**
 * Copies the sample times.
 *
 * # Safety
 * `out` must hold `capacity` doubles; `written` may be NULL.
 */
ThermoeitStatus thermoeit_trace_times(const ThermoeitTrace *trace,
                                      double *out,
                                      size_t capacity,
                                      size_t *written);

/**
 * Copies the flux samples, row-major `times x channels`.
 *
 * # Safety
 * `out` must hold `capacity` doubles; `written` may be NULL.
 */
ThermoeitStatus thermoeit_trace_values(const ThermoeitTrace *trace,
                                       double *out,
                                       size_t capacity,
                                       size_t *written);

/**
 * # Safety
 * `trace` must be NULL or come from [`thermoeit_model_flux`], freed once.
 */
void thermoeit_trace_free(ThermoeitTrace *trace);

/**
 * Root with positive imaginary part of the half-space characteristic
 * polynomial for a constant `dim x dim` tensor (row-major, normal last) and a
 * tangential frequency of `dim - 1` components.
 *
 * # Safety
 * `a` must hold `dim * dim` doubles, `xi` `dim - 1`; outputs must be writable.
 */
ThermoeitStatus thermoeit_halfspace_root(const double *a,
                                         size_t dim,
                                         const double *xi,
                                         double *re,
                                         double *im);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* THERMOEIT_H */
