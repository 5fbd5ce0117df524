#include <stdio.h>
#include <stdlib.h>
#include "sgmc.h"

#define CHECK(expr, want)                                                     \
    do {                                                                      \
        enum SgmcStatus s_ = (expr);                                          \
        if (s_ != (want)) {                                                   \
            char msg_[256];                                                   \
            sgmc_last_error(msg_, sizeof msg_);                               \
            fprintf(stderr, "%s: status %d: %s\n", #expr, (int)s_, msg_);     \
            return 1;                                                         \
        }                                                                     \
    } while (0)

int main(void) {
    struct SgmcSyntheticSpec spec = sgmc_synthetic_spec_default();
    spec.n_clips = 4;
    spec.seed = 3;
    SgmcCorpus *corpus = NULL;
    CHECK(sgmc_corpus_generate(&spec, &corpus), SGMC_STATUS_OK);

    struct SgmcCorpusDims dims;
    CHECK(sgmc_corpus_dims(corpus, &dims), SGMC_STATUS_OK);
    size_t len = dims.n_channels * dims.n_times;
    float *window = malloc(len * sizeof *window);
    CHECK(sgmc_corpus_window(corpus, 0, 0, window, len), SGMC_STATUS_OK);
    CHECK(sgmc_corpus_window(corpus, dims.n_clips, 0, window, len), SGMC_STATUS_INVALID_ARGUMENT);

    double za[4] = {1, 0, 0, 1}, zb[4] = {1, 0, 0, 1}, loss = -1;
    CHECK(sgmc_group_ntxent_loss(za, zb, 2, 2, 0.5, &loss), SGMC_STATUS_OK);

    printf("clips=%zu subjects=%zu channels=%zu times=%zu classes=%zu loss=%.6f\n", dims.n_clips,
           dims.n_subjects, dims.n_channels, dims.n_times, dims.n_classes, loss);
    free(window);
    sgmc_corpus_free(corpus);
    return 0;
}
