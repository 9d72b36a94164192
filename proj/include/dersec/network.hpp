#pragma once

#include <Eigen/Dense>

#include <complex>
#include <string>
#include <vector>

namespace dersec {

enum class BusKind { Gfm, Gfl, Load };

struct Bus {
    int id = 0;           // external (case file) identifier
    BusKind kind = BusKind::Load;
    double p_load = 0.0;  // nominal demand [pu]
    double q_load = 0.0;
    double shunt_b = 0.0; // fixed shunt susceptance [pu]
};

struct Branch {
    int from = 0;  // internal bus indices
    int to = 0;
    double g = 0.0;       // series admittance [pu]
    double b = 0.0;
    double b_charge = 0.0;  // total line-charging susceptance [pu]
    double tap = 1.0;       // off-nominal turns ratio on the from side
    double limit = 0.0;     // thermal limit [pu]; 0 means none
};

/// Grid-forming inverter parameters. Frequency droop r_f is stored in rad/s
/// per pu; the square-root capability constant of the steady-state voltage
/// relation is 8 r_v / e_star, derived from the droop definitions.
struct GfmParams {
    int bus = 0;          // internal index
    double e_star = 1.0;  // nominal terminal voltage [pu]
    double r_f = 0.0;     // frequency droop [rad/s per pu]
    double r_v = 0.0;     // voltage droop [pu per pu]

    double capability_constant() const { return 8.0 * r_v / e_star; }
};

struct Der {
    int bus = 0;         // internal index
    int gfm_index = -1;  // into NetworkModel::gfm, or -1 for a GFL/PV unit
    bool is_gfm() const { return gfm_index >= 0; }
};

/// Per-bus demand. perturb_loads scales a LoadSet multiplicatively.
struct LoadSet {
    Eigen::VectorXd p;
    Eigen::VectorXd q;
};

struct NetworkModel {
    std::string name;
    double base_mva = 100.0;
    double omega_star = 0.0;  // nominal frequency [rad/s]

    std::vector<Bus> buses;
    std::vector<Branch> branches;
    std::vector<Der> ders;       // order defines the control-input layout
    std::vector<GfmParams> gfm;

    std::vector<int> critical_buses;  // internal indices, output order
    std::vector<int> critical_lines;  // branch indices, output order

    Eigen::VectorXd v_targets;    // per critical bus [pu]

    Eigen::MatrixXcd ybus;        // dense bus admittance matrix

    // DER setpoints from the case file, control-input layout [P; Q].
    Eigen::VectorXd initial_setpoints;

    int bus_count() const { return static_cast<int>(buses.size()); }
    int der_count() const { return static_cast<int>(ders.size()); }
    int gfm_count() const { return static_cast<int>(gfm.size()); }
    int output_dim() const {
        return 1 + static_cast<int>(critical_buses.size() + critical_lines.size());
    }

    /// Positions (in DER order) of the GFL/PV units.
    std::vector<int> pv_der_indices() const;
    int bus_index(int external_id) const;  // -1 when absent

    LoadSet nominal_loads() const;

    /// Nominal output target [freq Hz, V at critical buses, line limits].
    Eigen::VectorXd output_targets() const;
};

/// Parse a network case document (key-value header plus [bus]/[branch]/
/// [der]/[gfm]/[gfl]/[critical]/[targets] tables). Validates bus references,
/// droops, and critical sets; builds the admittance matrix.
NetworkModel load_network(const std::string& case_text);
NetworkModel load_network_file(const std::string& path);

class Rng;

/// Scale every load's P and Q by independent factors drawn uniformly from
/// [1 - magnitude, 1 + magnitude].
LoadSet perturb_loads(const LoadSet& loads, double magnitude, Rng& rng);

} // namespace dersec
