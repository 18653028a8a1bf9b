#include <stdio.h>
#include <string.h>
#include "ilws_forge.h"

#define CHECK(cond, what)                                                   \
    do {                                                                    \
        if (!(cond)) {                                                      \
            const char *e = ilws_last_error();                              \
            fprintf(stderr, "%s failed: %s\n", what, e ? e : "(no error)"); \
            return 1;                                                       \
        }                                                                   \
    } while (0)

int main(void) {
    uint8_t prev[30], next[30];
    for (int i = 0; i < 30; i++) {
        prev[i] = 3;
        next[i] = 5;
    }
    IlwsGateResult r;
    CHECK(ilws_gate_evaluate(prev, 30, next, 30, 0.05, 0.05, &r) == ILWS_STATUS_OK, "gate");
    CHECK(r.accepted && r.p_value == 0.0, "degenerate uplift accepted");
    CHECK(ilws_gate_evaluate(prev, 30, prev, 30, 0.05, 0.05, &r) == ILWS_STATUS_OK, "gate");
    CHECK(!r.accepted && r.p_value == 1.0, "identical windows rejected");

    IlwsEngine *h = NULL;
    const char *cfg =
        "{\"gate\":{\"n_win\":5},\"budget_threshold\":100,\"prompt_budget\":4000}";
    CHECK(ilws_engine_new(cfg, NULL, 0, &h) == ILWS_STATUS_OK, "engine_new");

    char *out = NULL;
    CHECK(ilws_engine_snapshot(h, &out) == ILWS_STATUS_OK, "snapshot");
    CHECK(strstr(out, "\"trace_fingerprint\"") != NULL, "snapshot has fingerprint");
    ilws_string_free(out);

    CHECK(ilws_engine_veto(h, "missing", "admin", 1000, &out) == ILWS_STATUS_NOT_FOUND, "veto unknown");
    CHECK(ilws_last_error() != NULL, "error message set");

    ilws_engine_free(h);
    printf("ok %s\n", ilws_version());
    return 0;
}
