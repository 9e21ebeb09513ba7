#include <math.h>
#include <stdio.h>
#include "costodet.h"

int main(void) {
    double ab[10];
    if (cstd_schedule_alpha_bars(CSTD_SCHEDULE_COSINE, 10, ab) != CSTD_STATUS_OK) return 1;
    for (int k = 1; k < 10; k++) {
        if (!(ab[k] < ab[k - 1])) return 2;
    }
    if (cstd_schedule_alpha_bars(CSTD_SCHEDULE_LINEAR, 0, ab) != CSTD_STATUS_INVALID_ARGUMENT) return 3;
    if (cstd_last_error() == NULL) return 4;

    double labels[4] = {2.0, 1.0, 0.1, 0.0};
    double preds[4] = {2.0, 1.5, 0.1, 0.0};
    CstdChannelMetrics m;
    if (cstd_channel_metrics(preds, labels, 4, 2.0, &m) != CSTD_STATUS_OK) return 5;
    if (fabs(m.mae - 0.125) > 1e-12 || fabs(m.out_mae) > 1e-12 || fabs(m.emae) > 1e-12) return 6;

    CstdModel *model = NULL;
    if (cstd_model_load("/nonexistent/model.ckpt", &model) != CSTD_STATUS_IO || model != NULL) return 7;
    printf("ok\n");
    return 0;
}
