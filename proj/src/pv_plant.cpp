#include "dersec/pv_plant.hpp"

#include "dersec/common.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dersec {

double PvArrayTruth::v_shape() const {
    return v_oc / std::log(i_sc / i_0 + 1.0);
}

double pv_power(const PvArrayTruth& array, double v, double irradiance) {
    if (v < array.v_min - 1e-12 || v > array.v_max + 1e-12)
        throw InfeasibleError("pv_power: voltage outside operating window");
    if (irradiance < 0.0)
        throw InfeasibleError("pv_power: negative irradiance");
    const double vsh = array.v_shape();
    const double current = array.i_sc - array.i_0 * (std::exp(v / vsh) - 1.0);
    return (irradiance / array.g_ref) * v * current / array.p_base_w;
}

PvCapacity true_capacity(const PvArrayTruth& array, double irradiance) {
    if (irradiance <= 0.0)
        return {array.v_min, 0.0};

    // p(., G) is strictly concave on the window, so golden-section search is
    // exact up to the interval tolerance.
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = array.v_min;
    double b = array.v_max;
    double c = b - inv_phi * (b - a);
    double d = a + inv_phi * (b - a);
    double fc = pv_power(array, c, irradiance);
    double fd = pv_power(array, d, irradiance);
    while (b - a > 1e-7) {
        if (fc > fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = pv_power(array, c, irradiance);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = pv_power(array, d, irradiance);
        }
    }
    double v_best = 0.5 * (a + b);
    double p_best = pv_power(array, v_best, irradiance);
    for (double v : {array.v_min, array.v_max}) {
        const double p = pv_power(array, v, irradiance);
        if (p > p_best) {
            p_best = p;
            v_best = v;
        }
    }
    return {v_best, p_best};
}

IrradianceTrace::IrradianceTrace(std::vector<double> times,
                                 std::vector<std::vector<double>> values)
    : times_(std::move(times)), values_(std::move(values)) {
    if (times_.empty())
        throw ParseError("irradiance trace: no samples");
    if (values_.size() != times_.size())
        throw ParseError("irradiance trace: row count mismatch");
    site_count_ = values_.front().size();
    if (site_count_ == 0)
        throw ParseError("irradiance trace: no sites");
    for (std::size_t i = 0; i < times_.size(); ++i) {
        if (i > 0 && times_[i] <= times_[i - 1])
            throw ParseError("irradiance trace: timestamps not strictly increasing");
        if (values_[i].size() != site_count_)
            throw ParseError("irradiance trace: ragged rows");
        for (double v : values_[i])
            if (v < 0.0)
                throw ParseError("irradiance trace: negative irradiance");
    }
}

double IrradianceTrace::at(double time_s, std::size_t site) const {
    if (site >= site_count_)
        throw Error("irradiance trace: site index out of range");
    if (time_s <= times_.front())
        return values_.front()[site];
    if (time_s >= times_.back())
        return values_.back()[site];
    const auto it = std::upper_bound(times_.begin(), times_.end(), time_s);
    const std::size_t hi = static_cast<std::size_t>(it - times_.begin());
    const std::size_t lo = hi - 1;
    const double t0 = times_[lo];
    const double t1 = times_[hi];
    const double w = (time_s - t0) / (t1 - t0);
    return (1.0 - w) * values_[lo][site] + w * values_[hi][site];
}

IrradianceTrace load_irradiance(const std::string& csv_text) {
    std::istringstream in(csv_text);
    std::string line;
    bool have_header = false;
    std::vector<double> times;
    std::vector<std::vector<double>> values;
    std::size_t line_no = 0;

    while (std::getline(in, line)) {
        ++line_no;
        // Strip trailing carriage return and skip blank lines.
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos)
            continue;
        if (!have_header) {
            if (line.rfind("time_s", 0) != 0)
                throw ParseError("irradiance csv: expected header starting with time_s");
            have_header = true;
            continue;
        }
        std::vector<double> row;
        std::stringstream cells(line);
        std::string cell;
        while (std::getline(cells, cell, ',')) {
            std::size_t pos = 0;
            double v = 0.0;
            try {
                v = std::stod(cell, &pos);
            } catch (const std::exception&) {
                throw ParseError("irradiance csv: malformed number on line " +
                                 std::to_string(line_no));
            }
            if (pos != cell.find_last_not_of(" \t") + 1 && pos < cell.size())
                throw ParseError("irradiance csv: trailing junk on line " +
                                 std::to_string(line_no));
            row.push_back(v);
        }
        if (row.size() < 2)
            throw ParseError("irradiance csv: row with fewer than two columns on line " +
                             std::to_string(line_no));
        times.push_back(row.front());
        values.emplace_back(row.begin() + 1, row.end());
    }
    if (times.empty())
        throw ParseError("irradiance csv: no data rows");
    return IrradianceTrace(std::move(times), std::move(values));
}

IrradianceTrace load_irradiance_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ParseError("irradiance csv: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return load_irradiance(buf.str());
}

} // namespace dersec
