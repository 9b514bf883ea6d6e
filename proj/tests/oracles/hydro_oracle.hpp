#pragma once

// Scalar reference implementations used to check the vectorised kernels.

#include <algorithm>
#include <array>
#include <cmath>

namespace oracle {

// Interface value a_{j+1/2} from the parabolic interpolant written in the
// slope form of Colella & Woodward, with centred slopes.
inline double interface_value(double am1, double a0, double a1, double a2) {
    const double d0 = 0.5 * (a1 - am1);
    const double d1 = 0.5 * (a2 - a0);
    return a0 + 0.5 * (a1 - a0) - (d1 - d0) / 6.0;
}

struct Parabola {
    double left, right;
};

// Limited parabola in cell 2 of a five-cell stencil, using the a6 form.
inline Parabola limited_parabola(const std::array<double, 5>& a) {
    auto bounded = [](double v, double x, double y) { return std::clamp(v, std::min(x, y), std::max(x, y)); };
    double aR = bounded(interface_value(a[1], a[2], a[3], a[4]), a[2], a[3]);
    double aL = bounded(interface_value(a[0], a[1], a[2], a[3]), a[1], a[2]);
    const double a0 = a[2];
    if ((aR - a0) * (a0 - aL) <= 0) {
        return {a0, a0};
    }
    const double da = aR - aL;
    const double a6 = 6.0 * (a0 - 0.5 * (aL + aR));
    if (da * a6 > da * da) {
        aL = 3.0 * a0 - 2.0 * aR;
    } else if (-da * da > da * a6) {
        aR = 3.0 * a0 - 2.0 * aL;
    }
    return {aL, aR};
}

struct Prim {
    double rho, v[3], p;
};

// Euler flux of a primitive state along `axis` (mass, 3 momenta, energy).
inline std::array<double, 5> euler_flux(const Prim& w, int axis, double gamma) {
    const double ke = 0.5 * w.rho * (w.v[0] * w.v[0] + w.v[1] * w.v[1] + w.v[2] * w.v[2]);
    const double E = w.p / (gamma - 1.0) + ke;
    const double vn = w.v[axis];
    std::array<double, 5> f{};
    f[0] = w.rho * vn;
    for (int d = 0; d < 3; ++d) {
        f[1 + d] = w.rho * w.v[d] * vn + (d == axis ? w.p : 0.0);
    }
    f[4] = (E + w.p) * vn;
    return f;
}

inline std::array<double, 5> conserved(const Prim& w, double gamma) {
    const double ke = 0.5 * w.rho * (w.v[0] * w.v[0] + w.v[1] * w.v[1] + w.v[2] * w.v[2]);
    return {w.rho, w.rho * w.v[0], w.rho * w.v[1], w.rho * w.v[2], w.p / (gamma - 1.0) + ke};
}

// Central-upwind flux straight from its closed form.
inline std::array<double, 5> central_upwind(const Prim& L, const Prim& R, int axis, double gamma) {
    const double cL = std::sqrt(gamma * L.p / L.rho);
    const double cR = std::sqrt(gamma * R.p / R.rho);
    const double ap = std::max({0.0, L.v[axis] + cL, R.v[axis] + cR});
    const double am = std::min({0.0, L.v[axis] - cL, R.v[axis] - cR});
    const auto fL = euler_flux(L, axis, gamma);
    const auto fR = euler_flux(R, axis, gamma);
    const auto uL = conserved(L, gamma);
    const auto uR = conserved(R, gamma);
    std::array<double, 5> f{};
    for (int i = 0; i < 5; ++i) {
        f[i] = (ap * fL[i] - am * fR[i]) / (ap - am) + ap * am / (ap - am) * (uR[i] - uL[i]);
    }
    return f;
}

}  // namespace oracle
