#include <math.h>
#include <stdio.h>
#include "leakproto.h"

int main(void) {
    double a, s;
    if (lp_alpha_sigma(500, 1000, &a, &s) != LP_OK) return 1;
    if (fabs(a * a + s * s - 1.0) > 1e-12) return 2;

    double pos[] = {3.0, 2.0, 1.0}, neg[] = {2.5, 0.5};
    double auc, eer, thr, ovl;
    if (lp_roc_auc(pos, 3, neg, 2, &auc) != LP_OK || fabs(auc - 4.0 / 6.0) > 1e-15) return 3;
    if (lp_eer(pos, 3, neg, 2, &eer, &thr) != LP_OK) return 4;
    if (lp_ovl(pos, 3, neg, 2, 4, &ovl) != LP_OK || ovl < 0.0 || ovl > 1.0) return 5;

    struct LpModel *m = NULL;
    if (lp_model_load("/nonexistent/checkpoint.plck", &m) != LP_ERR_IO || m != NULL) return 6;
    if (lp_last_error()[0] == '\0') return 7;
    lp_model_free(NULL);
    printf("ok %.6f %.6f\n", auc, eer);
    return 0;
}
