#include "dersec/network.hpp"

#include "dersec/common.hpp"
#include "case_text.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace dersec {

using detail::CaseDocument;
using detail::parse_int;
using detail::parse_number;
using detail::tokenize_case;

std::vector<int> NetworkModel::pv_der_indices() const {
    std::vector<int> out;
    for (int i = 0; i < der_count(); ++i)
        if (!ders[static_cast<std::size_t>(i)].is_gfm())
            out.push_back(i);
    return out;
}

int NetworkModel::bus_index(int external_id) const {
    for (int i = 0; i < bus_count(); ++i)
        if (buses[static_cast<std::size_t>(i)].id == external_id)
            return i;
    return -1;
}

LoadSet NetworkModel::nominal_loads() const {
    LoadSet loads;
    loads.p.resize(bus_count());
    loads.q.resize(bus_count());
    for (int i = 0; i < bus_count(); ++i) {
        loads.p(i) = buses[static_cast<std::size_t>(i)].p_load;
        loads.q(i) = buses[static_cast<std::size_t>(i)].q_load;
    }
    return loads;
}

Eigen::VectorXd NetworkModel::output_targets() const {
    Eigen::VectorXd y(output_dim());
    y(0) = rad_to_hz(omega_star);
    for (std::size_t i = 0; i < critical_buses.size(); ++i)
        y(1 + static_cast<Eigen::Index>(i)) = v_targets(static_cast<Eigen::Index>(i));
    for (std::size_t i = 0; i < critical_lines.size(); ++i)
        y(1 + static_cast<Eigen::Index>(critical_buses.size() + i)) =
            branches[static_cast<std::size_t>(critical_lines[i])].limit;
    return y;
}

NetworkModel load_network(const std::string& case_text) {
    const CaseDocument doc = tokenize_case(case_text);
    NetworkModel model;

    auto scalar = [&](const std::string& key, double fallback, bool required) {
        const auto it = doc.scalars.find(key);
        if (it == doc.scalars.end()) {
            if (required)
                throw ParseError("case file: missing key '" + key + "'");
            return fallback;
        }
        return parse_number(it->second, key);
    };

    if (auto it = doc.scalars.find("name"); it != doc.scalars.end())
        model.name = it->second;
    model.base_mva = scalar("base_mva", 100.0, false);
    model.omega_star = hz_to_rad(scalar("nominal_hz", 60.0, true));

    const auto bus_table = doc.tables.find("bus");
    if (bus_table == doc.tables.end() || bus_table->second.empty())
        throw ParseError("case file: missing [bus] table");
    for (const auto& row : bus_table->second) {
        if (row.size() != 4)
            throw ParseError("case file: [bus] rows need 4 columns (id pload qload shunt_b)");
        Bus bus;
        bus.id = parse_int(row[0], "bus id");
        bus.p_load = parse_number(row[1], "bus pload");
        bus.q_load = parse_number(row[2], "bus qload");
        bus.shunt_b = parse_number(row[3], "bus shunt_b");
        if (model.bus_index(bus.id) >= 0)
            throw ParseError("case file: duplicate bus id " + std::to_string(bus.id));
        model.buses.push_back(bus);
    }

    auto require_bus = [&](int external_id, const std::string& what) {
        const int idx = model.bus_index(external_id);
        if (idx < 0)
            throw ParseError("case file: " + what + " references unknown bus " +
                             std::to_string(external_id));
        return idx;
    };

    const auto branch_table = doc.tables.find("branch");
    if (branch_table == doc.tables.end() || branch_table->second.empty())
        throw ParseError("case file: missing [branch] table");
    for (const auto& row : branch_table->second) {
        if (row.size() != 7)
            throw ParseError(
                "case file: [branch] rows need 7 columns (from to r x b tap limit)");
        Branch br;
        br.from = require_bus(parse_int(row[0], "branch from"), "branch");
        br.to = require_bus(parse_int(row[1], "branch to"), "branch");
        const double r = parse_number(row[2], "branch r");
        const double x = parse_number(row[3], "branch x");
        if (r == 0.0 && x == 0.0)
            throw ParseError("case file: branch with zero impedance");
        const std::complex<double> y = 1.0 / std::complex<double>(r, x);
        br.g = y.real();
        br.b = y.imag();
        br.b_charge = parse_number(row[4], "branch b");
        br.tap = parse_number(row[5], "branch tap");
        if (br.tap <= 0.0)
            throw ParseError("case file: nonpositive branch tap");
        br.limit = parse_number(row[6], "branch limit");
        model.branches.push_back(br);
    }

    // DER declarations; [gfm]/[gfl] tables carry parameters and setpoints.
    struct GfmRow {
        double e_star, rf_hz, rv, p_set, q_set;
    };
    struct GflRow {
        double p_set, q_set;
    };
    std::map<int, GfmRow> gfm_rows;  // keyed by external bus id
    std::map<int, GflRow> gfl_rows;

    if (auto it = doc.tables.find("gfm"); it != doc.tables.end()) {
        for (const auto& row : it->second) {
            if (row.size() != 6)
                throw ParseError(
                    "case file: [gfm] rows need 6 columns (bus e_star rf_hz rv p_set q_set)");
            const int bus = parse_int(row[0], "gfm bus");
            gfm_rows[bus] = {parse_number(row[1], "gfm e_star"),
                             parse_number(row[2], "gfm rf_hz"),
                             parse_number(row[3], "gfm rv"),
                             parse_number(row[4], "gfm p_set"),
                             parse_number(row[5], "gfm q_set")};
        }
    }
    if (auto it = doc.tables.find("gfl"); it != doc.tables.end()) {
        for (const auto& row : it->second) {
            if (row.size() != 3)
                throw ParseError("case file: [gfl] rows need 3 columns (bus p_set q_set)");
            const int bus = parse_int(row[0], "gfl bus");
            gfl_rows[bus] = {parse_number(row[1], "gfl p_set"),
                             parse_number(row[2], "gfl q_set")};
        }
    }

    const auto der_table = doc.tables.find("der");
    if (der_table == doc.tables.end() || der_table->second.empty())
        throw ParseError("case file: missing [der] table");
    std::vector<double> p_set, q_set;
    int expected_idx = 1;
    for (const auto& row : der_table->second) {
        if (row.size() != 3)
            throw ParseError("case file: [der] rows need 3 columns (idx kind bus)");
        const int idx = parse_int(row[0], "der idx");
        if (idx != expected_idx)
            throw ParseError("case file: [der] indices must be 1,2,... in order");
        ++expected_idx;
        const std::string& kind = row[1];
        const int external_bus = parse_int(row[2], "der bus");
        const int bus = require_bus(external_bus, "der");

        Der der;
        der.bus = bus;
        if (kind == "gfm") {
            const auto git = gfm_rows.find(external_bus);
            if (git == gfm_rows.end())
                throw ParseError("case file: gfm der at bus " + std::to_string(external_bus) +
                                 " has no [gfm] row");
            GfmParams p;
            p.bus = bus;
            p.e_star = git->second.e_star;
            p.r_f = hz_to_rad(git->second.rf_hz);
            p.r_v = git->second.rv;
            if (p.e_star <= 0.0)
                throw ParseError("case file: nonpositive gfm e_star");
            if (p.r_f <= 0.0 || p.r_v <= 0.0)
                throw ParseError("case file: nonpositive droop");
            der.gfm_index = static_cast<int>(model.gfm.size());
            model.gfm.push_back(p);
            model.buses[static_cast<std::size_t>(bus)].kind = BusKind::Gfm;
            p_set.push_back(git->second.p_set);
            q_set.push_back(git->second.q_set);
        } else if (kind == "gfl") {
            const auto git = gfl_rows.find(external_bus);
            if (git == gfl_rows.end())
                throw ParseError("case file: gfl der at bus " + std::to_string(external_bus) +
                                 " has no [gfl] row");
            model.buses[static_cast<std::size_t>(bus)].kind = BusKind::Gfl;
            p_set.push_back(git->second.p_set);
            q_set.push_back(git->second.q_set);
        } else {
            throw ParseError("case file: unknown der kind '" + kind + "'");
        }
        model.ders.push_back(der);
    }
    if (model.gfm.empty())
        throw ParseError("case file: at least one grid-forming DER is required");

    const int m = model.der_count();
    model.initial_setpoints.resize(2 * m);
    for (int i = 0; i < m; ++i) {
        model.initial_setpoints(i) = p_set[static_cast<std::size_t>(i)];
        model.initial_setpoints(m + i) = q_set[static_cast<std::size_t>(i)];
    }

    // Critical sets.
    const auto crit = doc.section_scalars.find("critical");
    if (crit == doc.section_scalars.end())
        throw ParseError("case file: missing [critical] section");
    {
        const auto bit = crit->second.find("buses");
        if (bit == crit->second.end())
            throw ParseError("case file: [critical] needs 'buses'");
        std::istringstream ids(bit->second);
        std::string tok;
        while (ids >> tok)
            model.critical_buses.push_back(require_bus(parse_int(tok, "critical bus"),
                                                       "critical set"));
        const auto lit = crit->second.find("lines");
        if (lit != crit->second.end()) {
            std::istringstream pairs(lit->second);
            while (pairs >> tok) {
                const auto dash = tok.find('-');
                if (dash == std::string::npos)
                    throw ParseError("case file: critical line must be from-to: '" + tok + "'");
                const int fb = require_bus(parse_int(tok.substr(0, dash), "critical line"),
                                           "critical line");
                const int tb = require_bus(parse_int(tok.substr(dash + 1), "critical line"),
                                           "critical line");
                int found = -1;
                for (std::size_t b = 0; b < model.branches.size(); ++b) {
                    if (model.branches[b].from == fb && model.branches[b].to == tb) {
                        found = static_cast<int>(b);
                        break;
                    }
                }
                if (found < 0)
                    throw ParseError("case file: critical line " + tok + " not in branch list");
                model.critical_lines.push_back(found);
            }
        }
    }

    // Voltage targets for the critical buses.
    model.v_targets = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(model.critical_buses.size()));
    if (auto sit = doc.section_scalars.find("targets"); sit != doc.section_scalars.end()) {
        if (auto vit = sit->second.find("v"); vit != sit->second.end()) {
            std::istringstream entries(vit->second);
            std::string tok;
            while (entries >> tok) {
                const auto colon = tok.find(':');
                if (colon == std::string::npos)
                    throw ParseError("case file: target must be bus:value: '" + tok + "'");
                const int bus = require_bus(parse_int(tok.substr(0, colon), "target bus"),
                                            "target");
                const double value = parse_number(tok.substr(colon + 1), "target value");
                bool matched = false;
                for (std::size_t i = 0; i < model.critical_buses.size(); ++i) {
                    if (model.critical_buses[i] == bus) {
                        model.v_targets(static_cast<Eigen::Index>(i)) = value;
                        matched = true;
                    }
                }
                if (!matched)
                    throw ParseError("case file: voltage target for non-critical bus '" + tok +
                                     "'");
            }
        }
    }

    // Admittance matrix (taps on the from side, line charging split evenly).
    const int n = model.bus_count();
    model.ybus = Eigen::MatrixXcd::Zero(n, n);
    for (const Branch& br : model.branches) {
        const std::complex<double> y(br.g, br.b);
        const std::complex<double> ysh(0.0, 0.5 * br.b_charge);
        const double t = br.tap;
        model.ybus(br.from, br.from) += (y + ysh) / (t * t);
        model.ybus(br.from, br.to) += -y / t;
        model.ybus(br.to, br.from) += -y / t;
        model.ybus(br.to, br.to) += y + ysh;
    }
    for (int i = 0; i < n; ++i)
        model.ybus(i, i) += std::complex<double>(0.0, model.buses[static_cast<std::size_t>(i)].shunt_b);

    return model;
}

NetworkModel load_network_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ParseError("case file: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    NetworkModel model = load_network(buf.str());
    if (model.name.empty())
        model.name = path;
    return model;
}

LoadSet perturb_loads(const LoadSet& loads, double magnitude, Rng& rng) {
    if (magnitude < 0.0 || magnitude >= 1.0)
        throw Error("perturb_loads: magnitude must lie in [0, 1)");
    LoadSet out;
    out.p = loads.p;
    out.q = loads.q;
    for (Eigen::Index i = 0; i < loads.p.size(); ++i) {
        out.p(i) *= rng.uniform(1.0 - magnitude, 1.0 + magnitude);
        out.q(i) *= rng.uniform(1.0 - magnitude, 1.0 + magnitude);
    }
    return out;
}

} // namespace dersec
