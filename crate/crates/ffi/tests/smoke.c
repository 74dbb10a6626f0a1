#include <math.h>
#include <stdio.h>
#include <string.h>

#include "thermoeit.h"

static const char *CONFIG =
    "[domain]\nshape = \"box\"\nlengths = [1.0, 1.0]\ndivisions = [6, 6]\n"
    "[coefficients]\ngamma = \"2\"\nkappa = \"1\"\n";

int main(void) {
    ThermoeitConfig *cfg = NULL;
    ThermoeitModel *model = NULL;
    if (thermoeit_config_parse(CONFIG, &cfg) != THERMOEIT_STATUS_OK) return 1;
    if (thermoeit_model_new(cfg, &model) != THERMOEIT_STATUS_OK) return 2;
    size_t nb = 0;
    thermoeit_model_boundary_count(model, &nb);
    double pts[3 * 64], h[64], e = 0.0;
    if (nb > 64) return 3;
    thermoeit_model_boundary_points(model, pts, 3 * nb, NULL);
    for (size_t i = 0; i < nb; i++) h[i] = pts[3 * i + 1];
    if (thermoeit_model_dtn_energy(model, h, nb, &e) != THERMOEIT_STATUS_OK) return 4;
    if (fabs(e - 2.0) > 1e-10) return 5;
    ThermoeitModel *other = NULL;
    if (thermoeit_model_new(NULL, &other) != THERMOEIT_STATUS_NULL_POINTER || other != NULL) return 6;
    if (thermoeit_last_error() == NULL || strlen(thermoeit_last_error()) == 0) return 7;
    thermoeit_model_free(model);
    thermoeit_config_free(cfg);
    printf("ok %s\n", thermoeit_version());
    return 0;
}
