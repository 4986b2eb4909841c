#pragma once

// Discrete diffusion schedules: variance-preserving (cumulative alpha-bar) for
// the image model and a decreasing noise-level ladder for the video model.
// Invariants are enforced at construction; a bad schedule never gets out.

#include "r2v/tensor.hpp"

namespace r2v {

enum class ScheduleKind { VariancePreserving, NoiseLadder };

struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::VariancePreserving;
    std::vector<double> alphas_bar;  // VP: abar_t in (0,1], decreasing, abar_0 >= 1-1e-3
    std::vector<double> sigmas;      // ladder: strictly decreasing to sigma_min >= 0

    int steps_total() const {
        return static_cast<int>(kind == ScheduleKind::VariancePreserving ? alphas_bar.size()
                                                                         : sigmas.size());
    }

    double abar(int t) const {
        R2V_CHECK(kind == ScheduleKind::VariancePreserving, "abar: not a VP schedule");
        R2V_CHECK(t >= 0 && t < steps_total(), "abar: step out of range");
        return alphas_bar[static_cast<size_t>(t)];
    }

    double sigma(int i) const {
        R2V_CHECK(kind == ScheduleKind::NoiseLadder, "sigma: not a ladder schedule");
        R2V_CHECK(i >= 0 && i < steps_total(), "sigma: level out of range");
        return sigmas[static_cast<size_t>(i)];
    }

    void validate() const {
        if (kind == ScheduleKind::VariancePreserving) {
            if (alphas_bar.empty()) throw ConfigError("schedule: empty alphas_bar");
            if (!(alphas_bar.front() >= 1.0 - 1e-3)) {
                throw ConfigError("schedule: abar_0 must be >= 1-1e-3");
            }
            for (size_t i = 0; i < alphas_bar.size(); i++) {
                if (!(alphas_bar[i] > 0.0 && alphas_bar[i] <= 1.0)) {
                    throw ConfigError("schedule: abar outside (0,1]");
                }
                if (i > 0 && !(alphas_bar[i] < alphas_bar[i - 1])) {
                    throw ConfigError("schedule: abar must decrease monotonically");
                }
            }
        } else {
            if (sigmas.size() < 2) throw ConfigError("schedule: ladder needs >= 2 levels");
            for (size_t i = 0; i < sigmas.size(); i++) {
                if (!(sigmas[i] >= 0.0)) throw ConfigError("schedule: sigma must be >= 0");
                if (i > 0 && !(sigmas[i] < sigmas[i - 1])) {
                    throw ConfigError("schedule: sigmas must strictly decrease");
                }
            }
        }
    }

    // Linear-beta DDPM schedule; defaults keep abar_0 within the contract.
    static NoiseSchedule variance_preserving(int T, double beta_start = 1e-4, double beta_end = 0.02) {
        if (T < 1) throw ConfigError("schedule: T must be >= 1");
        NoiseSchedule s;
        s.kind = ScheduleKind::VariancePreserving;
        s.alphas_bar.resize(static_cast<size_t>(T));
        double prod = 1.0;
        for (int t = 0; t < T; t++) {
            double beta = (T > 1) ? beta_start + (beta_end - beta_start) * t / (T - 1) : beta_start;
            prod *= 1.0 - beta;
            s.alphas_bar[static_cast<size_t>(t)] = prod;
        }
        s.validate();
        return s;
    }

    // Karras-style ladder from sigma_max down to sigma_min, with a terminal 0
    // so the final sampling update lands on the clean prediction.
    static NoiseSchedule noise_ladder(int levels, double sigma_max = 8.0, double sigma_min = 0.02,
                                      double rho = 7.0) {
        if (levels < 2) throw ConfigError("schedule: ladder needs >= 2 levels");
        if (!(sigma_max > sigma_min && sigma_min > 0.0)) {
            throw ConfigError("schedule: need sigma_max > sigma_min > 0");
        }
        NoiseSchedule s;
        s.kind = ScheduleKind::NoiseLadder;
        int ramp = levels - 1;  // last slot is the terminal zero
        double inv_rho_max = std::pow(sigma_max, 1.0 / rho);
        double inv_rho_min = std::pow(sigma_min, 1.0 / rho);
        for (int i = 0; i < ramp; i++) {
            double u = (ramp > 1) ? static_cast<double>(i) / (ramp - 1) : 0.0;
            s.sigmas.push_back(std::pow(inv_rho_max + u * (inv_rho_min - inv_rho_max), rho));
        }
        s.sigmas.front() = sigma_max;  // exact endpoints (pow round-trips drift)
        s.sigmas[static_cast<size_t>(ramp - 1)] = sigma_min;
        s.sigmas.push_back(0.0);
        s.validate();
        return s;
    }

    // S+1 strictly increasing schedule indices from 0 to T-1 used as the grid
    // for an S-update sampling or inversion pass. S = 0 yields an empty grid
    // (the identity trajectory).
    std::vector<int> sample_grid(int steps) const {
        R2V_CHECK(steps >= 0, "sample_grid: negative step count");
        if (steps == 0) return {};
        int T = steps_total();
        R2V_CHECK(steps <= T, "sample_grid: more steps than schedule entries");
        std::vector<int> grid(static_cast<size_t>(steps) + 1);
        for (int j = 0; j <= steps; j++) {
            grid[static_cast<size_t>(j)] =
                static_cast<int>(std::llround(static_cast<double>(j) * (T - 1) / steps));
        }
        for (size_t j = 1; j < grid.size(); j++) {
            R2V_CHECK(grid[j] > grid[j - 1], "sample_grid: step count too dense for schedule");
        }
        return grid;
    }
};

}  // namespace r2v
