/* C interface to the signforge attack and evaluation library. */

#ifndef SIGNFORGE_H
#define SIGNFORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  /**
   * The call succeeded.
   */
  SF_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SF_NULL_ARGUMENT = 1,
  /**
   * An argument failed validation; the message names it.
   */
  SF_INVALID_ARGUMENT = 2,
  /**
   * The operation itself failed.
   */
  SF_RUNTIME_ERROR = 3,
  /**
   * An internal panic was caught at the boundary.
   */
  SF_PANIC = 4,
} sf_status;

/**
 * Opaque RGB image with values in `[0,1]`.
 */
typedef struct sf_image sf_image;

/**
 * Opaque bundle of the diffusion backend, the detector, and the
 * embedder, all at their default settings.
 */
typedef struct sf_pipeline sf_pipeline;

/**
 * One detection after class-wise non-maximum suppression.
 */
typedef struct {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
  /**
   * Score of the predicted class, in `[0,1]`.
   */
  double score;
  uint32_t class_index;
} sf_detection;

/**
 * Attack hyperparameters. Get defaults from
 * [`sf_attack_params_default`] and override fields as needed.
 */
typedef struct {
  uint32_t target_class;
  uint64_t seed;
  uint32_t iterations;
  /**
   * Proposals kept by the anchor-overlap filter.
   */
  uint32_t top_k;
  /**
   * Weight of the detection loss.
   */
  double lambda;
  /**
   * Step size on the initial latent.
   */
  double beta;
  /**
   * Step size on the null-text embedding.
   */
  double gamma;
  /**
   * Placement draws averaged per iteration.
   */
  uint32_t eot_samples;
} sf_attack_params;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread. Empty string
 * when nothing has failed yet.
 */
const char *sf_last_error_message(void);

/**
 * Library version as a static string; never freed by the caller.
 */
const char *sf_version(void);

/**
 * Creates a pipeline with the default backends. Free with
 * [`sf_pipeline_free`].
 */
sf_pipeline *sf_pipeline_new(void);

/**
 * Frees a pipeline; a null pointer is ignored.
 */
void sf_pipeline_free(sf_pipeline *pipeline);

/**
 * Number of sign classes the pipeline's detector scores.
 */
size_t sf_pipeline_class_count(const sf_pipeline *pipeline);

/**
 * Builds an image from row-major interleaved RGB doubles of length
 * `height * width * 3`. Values must already lie in `[0,1]`.
 */
sf_status sf_image_new(const double *data, size_t height, size_t width, sf_image **out);

/**
 * Loads a PNG or JPEG file into a new image handle.
 */
sf_status sf_image_read(const char *path, sf_image **out);

/**
 * Writes an image as PNG.
 */
sf_status sf_image_write_png(const sf_image *image, const char *path);

/**
 * Image height in pixels; 0 for a null handle.
 */
size_t sf_image_height(const sf_image *image);

/**
 * Image width in pixels; 0 for a null handle.
 */
size_t sf_image_width(const sf_image *image);

/**
 * Copies the image into `out` as row-major interleaved RGB doubles.
 * `len` must equal `height * width * 3`.
 */
sf_status sf_image_copy_data(const sf_image *image, double *out, size_t len);

/**
 * Frees an image; a null pointer is ignored.
 */
void sf_image_free(sf_image *image);

/**
 * Runs the detector on an image. Always writes the total number of
 * detections to `count`; copies at most `capacity` of them into `out`,
 * which may be null to query the count alone.
 */
sf_status sf_detect(const sf_pipeline *pipeline,
                    const sf_image *image,
                    double score_thresh,
                    double iou_thresh,
                    sf_detection *out,
                    size_t capacity,
                    size_t *count);

/**
 * The library's default attack settings for class 0, seed 0.
 */
sf_attack_params sf_attack_params_default(void);

/**
 * Optimizes a patch against the pipeline's detector over the given
 * backgrounds and returns the best image found. The prompt is either a
 * plain string, used as a single adversarial segment, or a JSON
 * document with explicit tagged segments.
 */
sf_status sf_attack(const sf_pipeline *pipeline,
                    const sf_attack_params *params,
                    const char *prompt,
                    const sf_image *const *backgrounds,
                    size_t background_count,
                    sf_image **out);

/**
 * Measures the attack success rate of a patch over `case_count`
 * randomized placements onto the backgrounds, judged against
 * `target_class` at the default thresholds. Writes a value in `[0,1]`.
 */
sf_status sf_evaluate_asr(const sf_pipeline *pipeline,
                          const sf_image *patch,
                          const sf_image *const *backgrounds,
                          size_t background_count,
                          uint32_t target_class,
                          size_t case_count,
                          uint64_t seed,
                          double *asr);

/**
 * Recovers the initial latent and per-step null texts that reproduce an
 * image under the pipeline's chain, then reconstructs from them.
 * Writes the reconstruction error to `recon_mse` and, when
 * `reconstruction` is non-null, a new image handle.
 */
sf_status sf_invert(const sf_pipeline *pipeline,
                    const sf_image *image,
                    const char *prompt,
                    double *recon_mse,
                    sf_image **reconstruction);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIGNFORGE_H */
