#pragma once

#include <cmath>
#include <vector>

namespace oracle {

// Lane-Emden solution theta(xi) for index n by classical RK4 on a fine grid.
class LaneEmden {
public:
    explicit LaneEmden(double n, double h = 1e-4) : n_(n), h_(h) {
        // series start avoids the singular origin
        double x = h;
        double y = 1 - x * x / 6 + n * std::pow(x, 4) / 120;
        double z = -x / 3 + n * std::pow(x, 3) / 30;
        theta_.push_back(1);
        theta_.push_back(y);
        auto f = [n](double x, double y, double z, double& dy, double& dz) {
            dy = z;
            dz = -std::pow(std::max(y, 0.0), n) - 2 * z / x;
        };
        double prev = y;
        while (y > 0) {
            double k1y, k1z, k2y, k2z, k3y, k3z, k4y, k4z;
            f(x, y, z, k1y, k1z);
            f(x + h / 2, y + h / 2 * k1y, z + h / 2 * k1z, k2y, k2z);
            f(x + h / 2, y + h / 2 * k2y, z + h / 2 * k2z, k3y, k3z);
            f(x + h, y + h * k3y, z + h * k3z, k4y, k4z);
            prev = y;
            y += h / 6 * (k1y + 2 * k2y + 2 * k3y + k4y);
            z += h / 6 * (k1z + 2 * k2z + 2 * k3z + k4z);
            x += h;
            theta_.push_back(y);
        }
        xi1_ = x - h * y / (y - prev);
    }

    double xi1() const { return xi1_; }

    double theta(double xi) const {
        if (xi >= xi1_) return 0;
        const double u = xi / h_;
        const std::size_t i = static_cast<std::size_t>(u);
        if (i + 1 >= theta_.size()) return 0;
        const double f = u - static_cast<double>(i);
        return std::max(0.0, (1 - f) * theta_[i] + f * theta_[i + 1]);
    }

    // Density profile of a star of surface radius R and central density rho_c.
    double density(double r, double R, double rho_c = 1) const {
        return rho_c * std::pow(theta(xi1_ * r / R), n_);
    }

private:
    double n_, h_, xi1_ = 0;
    std::vector<double> theta_;
};

}  // namespace oracle
