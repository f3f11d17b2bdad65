#ifndef PCAC_H
#define PCAC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum {
  PCAC_STATUS_OK = 0,
  PCAC_STATUS_NULL_POINTER = 1,
  PCAC_STATUS_INVALID_ARGUMENT = 2,
  PCAC_STATUS_IO = 3,
  PCAC_STATUS_PARSE = 4,
  PCAC_STATUS_GEOMETRY = 5,
  PCAC_STATUS_DECODE_ERROR = 6,
  PCAC_STATUS_NUMERIC = 7,
  PCAC_STATUS_INTERNAL = 8,
} PcacStatus;

/**
 * Opaque voxelized point cloud.
 */
typedef struct PcacCloud PcacCloud;

/**
 * Opaque model parameter set.
 */
typedef struct PcacParams PcacParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *pcac_last_error_message(void);

/**
 * Loads a PLY file (`x,y,z` and `red,green,blue`) as a cloud with the
 * given octree depth.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
PcacStatus pcac_cloud_load_ply(const char *path, uint8_t depth, PcacCloud **out);

/**
 * Writes a cloud as binary PLY with 8-bit colors.
 *
 * # Safety
 * `cloud` must be a live handle and `path` a valid string.
 */
PcacStatus pcac_cloud_write_ply(const PcacCloud *cloud, const char *path);

/**
 * Converts colors to the analysis space (BT.709 full-range YUV).
 *
 * # Safety
 * `cloud` must be a live handle; `out` receives a new handle.
 */
PcacStatus pcac_cloud_rgb_to_yuv(const PcacCloud *cloud, PcacCloud **out);

/**
 * Inverse of [`pcac_cloud_rgb_to_yuv`].
 *
 * # Safety
 * `cloud` must be a live handle; `out` receives a new handle.
 */
PcacStatus pcac_cloud_yuv_to_rgb(const PcacCloud *cloud, PcacCloud **out);

/**
 * Number of occupied voxels.
 *
 * # Safety
 * `cloud` must be a live handle.
 */
size_t pcac_cloud_point_count(const PcacCloud *cloud);

/**
 * Octree depth in bits per axis.
 *
 * # Safety
 * `cloud` must be a live handle.
 */
uint8_t pcac_cloud_depth(const PcacCloud *cloud);

/**
 * Releases a cloud handle. Null is ignored.
 *
 * # Safety
 * `cloud` must come from this library and not be used afterwards.
 */
void pcac_cloud_free(PcacCloud *cloud);

/**
 * Default model parameters for a depth/root-level pair; `predictor` is
 * one of `none`, `linear`, `gpcc`, `pbf`.
 *
 * # Safety
 * `predictor` must be a valid string and `out` a valid pointer.
 */
PcacStatus pcac_params_default(uint8_t depth,
                               uint8_t root_level,
                               const char *predictor,
                               PcacParams **out);

/**
 * Loads a parameters JSON file.
 *
 * # Safety
 * `path` must be a valid string and `out` a valid pointer.
 */
PcacStatus pcac_params_load(const char *path, PcacParams **out);

/**
 * Saves parameters as JSON.
 *
 * # Safety
 * `params` must be a live handle and `path` a valid string.
 */
PcacStatus pcac_params_save(const PcacParams *params, const char *path);

/**
 * Releases a parameters handle. Null is ignored.
 *
 * # Safety
 * `params` must come from this library and not be used afterwards.
 */
void pcac_params_free(PcacParams *params);

/**
 * Encodes a cloud into a freshly allocated bitstream buffer. A positive
 * `delta` overrides the quantizer step from the parameters.
 *
 * # Safety
 * `cloud` and `params` must be live handles; `out_data` and `out_len`
 * valid pointers. The buffer must be released with [`pcac_buffer_free`].
 */
PcacStatus pcac_encode(const PcacCloud *cloud,
                       const PcacParams *params,
                       double delta,
                       uint8_t **out_data,
                       size_t *out_len);

/**
 * Releases a buffer returned by [`pcac_encode`].
 *
 * # Safety
 * `data`/`len` must be exactly what the encoder returned.
 */
void pcac_buffer_free(uint8_t *data, size_t len);

/**
 * Decodes a bitstream against its geometry cloud (attribute values of the
 * geometry are ignored); the reconstructed cloud is returned in `out`.
 *
 * # Safety
 * `data` must point to `len` readable bytes, `geometry` and `params` must
 * be live handles, and `out` a valid pointer.
 */
PcacStatus pcac_decode(const uint8_t *data,
                       size_t len,
                       const PcacCloud *geometry,
                       const PcacParams *params,
                       PcacCloud **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PCAC_H */
