#pragma once

#include <string>
#include <vector>

namespace dersec {

/// Ground-truth PV array: a simplified single-diode product model
///   p(v, G) = (G / G_ref) * v * (I_sc - I_0 (exp(v / V_sh) - 1)) / P_base
/// strictly concave in v on (0, v_oc] for G > 0. The controller never sees
/// this object; it only sees (voltage, power) measurements.
struct PvArrayTruth {
    double v_oc = 40.0;     // open-circuit voltage [V]
    double i_sc = 8.0;      // short-circuit current [A]
    double i_0 = 1e-4;      // diode saturation current [A]
    double p_base_w = 700;  // watts per pu
    double g_ref = 1000.0;  // reference irradiance [W/m^2]
    double v_min = 0.0;     // operating window [V]
    double v_max = 40.0;

    /// Diode shape parameter derived so that p(v_oc, G) == 0 exactly.
    double v_shape() const;
};

/// Array power in pu at terminal voltage v [V] and irradiance [W/m^2].
/// Throws InfeasibleError when v is outside the operating window.
double pv_power(const PvArrayTruth& array, double v, double irradiance);

struct PvCapacity {
    double v_mpp = 0.0;  // maximizing voltage [V]
    double p_max = 0.0;  // maximum power [pu]
};

/// Maximizer and maximum of pv_power over the voltage window (golden-section
/// with endpoint comparison).
PvCapacity true_capacity(const PvArrayTruth& array, double irradiance);

/// Timestamped irradiance per PV site with linear interpolation between
/// samples; queries outside the span clamp to the first/last sample.
class IrradianceTrace {
public:
    IrradianceTrace(std::vector<double> times, std::vector<std::vector<double>> values);

    double at(double time_s, std::size_t site) const;
    std::size_t site_count() const { return site_count_; }
    std::size_t sample_count() const { return times_.size(); }
    double start_time() const { return times_.front(); }
    double end_time() const { return times_.back(); }
    const std::vector<double>& times() const { return times_; }

private:
    std::vector<double> times_;
    std::vector<std::vector<double>> values_;  // per sample, per site
    std::size_t site_count_ = 0;
};

/// Parse an irradiance CSV: header `time_s,site_1,...,site_K`, one row per
/// sample, strictly increasing times, nonnegative values.
IrradianceTrace load_irradiance(const std::string& csv_text);
IrradianceTrace load_irradiance_file(const std::string& path);

} // namespace dersec
