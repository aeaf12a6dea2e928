/* blora: block-indexed low-rank adapter toolkit.
 *
 * C API over the C++ core. All objects are opaque handles; every fallible
 * call returns a blora_status and leaves a human-readable message in
 * blora_last_error() (thread-local, valid until the next call on that
 * thread). Strings returned through char** are heap-allocated and must be
 * released with blora_string_free().
 */
#ifndef BLORA_H
#define BLORA_H

#include <stdint.h>

#ifdef _WIN32
#define BLORA_API __declspec(dllexport)
#else
#define BLORA_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum blora_status {
    BLORA_OK = 0,
    BLORA_ERR_USAGE = 1,     /* bad arguments */
    BLORA_ERR_FORMAT = 2,    /* malformed input file */
    BLORA_ERR_INVARIANT = 3, /* domain invariant violated (overlap, ...) */
    BLORA_ERR_INTERNAL = 4,
} blora_status;

typedef struct blora_adapter blora_adapter;

BLORA_API const char* blora_version(void);
BLORA_API const char* blora_last_error(void);
BLORA_API void blora_string_free(char* str);

/* ---- adapter files (safetensors containers) ---- */

BLORA_API blora_status blora_adapter_open(const char* path, blora_adapter** out);
BLORA_API blora_status blora_adapter_save(const blora_adapter* adapter, const char* path);
BLORA_API void blora_adapter_free(blora_adapter* adapter);

/* Per-block tensor counts, ranks, dtypes, metadata and out-of-topology keys,
 * as a JSON document. */
BLORA_API blora_status blora_adapter_inspect_json(const blora_adapter* adapter, char** out_json);

/* Digest of the canonical serialized form ("fnv1a64:..."). Scheme-translated
 * twins of one adapter share a digest. */
BLORA_API blora_status blora_adapter_digest(const blora_adapter* adapter, char** out_digest);
BLORA_API blora_status blora_file_digest(const char* path, char** out_digest);

BLORA_API blora_status blora_adapter_set_metadata(blora_adapter* adapter, const char* key,
                                                  const char* value);

/* ---- adapter algebra ---- */

/* block: "W0".."W7" or a diffusers path prefix. role: "content" or "style". */
BLORA_API blora_status blora_adapter_extract(const blora_adapter* adapter, const char* block,
                                             const char* role, blora_adapter** out);

BLORA_API blora_status blora_adapter_combine(const blora_adapter* content,
                                             const blora_adapter* style, blora_adapter** out);

BLORA_API blora_status blora_adapter_scale(const blora_adapter* adapter, double alpha,
                                           blora_adapter** out);

/* Applies every pair onto the dense weight of the same name in the base
 * file; writes the merged weights. manifest_json may be NULL. */
BLORA_API blora_status blora_merge_files(const char* base_path, const blora_adapter* adapter,
                                         double alpha, const char* manifest_json,
                                         const char* out_path);

/* ---- topology ---- */

/* The full block <-> key mapping table. scheme: "dot" or "kohya". */
BLORA_API blora_status blora_keymap_json(const char* scheme, char** out_json);

/* ---- toy training harness ---- */

/* Zeroed fields fall back to the defaults noted on the right. */
typedef struct blora_toy_params {
    uint64_t seed;          /* base model seed */
    int token_dim;          /* 16 */
    int head_count;         /* 2 */
    int grid_side;          /* 4 */
    int prompt_dim;         /* 16 */
    int steps;              /* 1000 */
    double learning_rate;   /* 5e-5 */
    int rank;               /* 4 */
    int content_label;      /* synthetic sample labels */
    int style_label;
    uint64_t sample_seed;
    const char* blocks;     /* "W4,W5" */
    const char* prompt;     /* "A [v]" */
    int center_crop;        /* 0 */
} blora_toy_params;

BLORA_API blora_status blora_train_toy(const blora_toy_params* params,
                                       blora_adapter** out_adapter, char** out_report_json);

/* Dense frozen base projections of the toy model, keyed by stem; usable as
 * the base file of blora_merge_files. */
BLORA_API blora_status blora_toy_base_weights(const blora_toy_params* params,
                                              const char* manifest_json, const char* out_path);

/* Final reconstruction loss for every unordered block pair (singletons on
 * the diagonal). thread_count 0 picks the hardware concurrency. */
BLORA_API blora_status blora_pair_grid_json(const blora_toy_params* params, int thread_count,
                                            char** out_json);

/* ---- probe and evaluation ---- */

typedef struct blora_probe_params {
    uint64_t seed;          /* pair sampling, stub embedder, latents */
    int pairs;              /* per family; 400 */
    uint64_t model_seed;
    int token_dim;          /* 16 */
    int head_count;         /* 2 */
    int grid_side;          /* 4 */
    int prompt_dim;         /* 16 */
    const char* adapter_path; /* optional adapter to attach */
    double adapter_alpha;   /* 1.0 */
} blora_probe_params;

BLORA_API blora_status blora_probe_json(const blora_probe_params* params, char** out_json);

/* Cosine evaluation of precomputed embeddings. The label arguments are
 * comma-separated lists of equal length naming vectors in the embeddings
 * file. */
BLORA_API blora_status blora_eval_json(const char* embeddings_path, const char* output_labels,
                                       const char* style_ref_labels,
                                       const char* content_ref_labels, char** out_json);

#ifdef __cplusplus
}
#endif

#endif /* BLORA_H */
