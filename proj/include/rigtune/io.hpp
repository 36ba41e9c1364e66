// JSON serialization: rig files, expression-set files, geometry captures.
// Rig round-trips are bit-exact on the parameter vector (the serializer
// emits shortest-round-trip doubles and the sparse layout is canonical).
#pragma once

#include <rigtune/fitting.hpp>
#include <rigtune/rig.hpp>

#include <json.hpp>

#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace rigtune {

using Json = nlohmann::json;

inline Json vec_to_json(const Vec& v) {
    Json arr = Json::array();
    for (int i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

inline Vec vec_from_json(const Json& arr, const std::string& what) {
    if (!arr.is_array()) throw ConfigError(what + ": expected an array");
    Vec v(static_cast<Eigen::Index>(arr.size()));
    for (std::size_t i = 0; i < arr.size(); ++i) {
        if (!arr[i].is_number()) throw ConfigError(what + ": expected numbers");
        v[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
    }
    return v;
}

// ---------------------------------------------------------------------------
// Rig files.

inline Json rig_to_json(const Rig& rig) {
    Json j;
    j["n_controls"] = rig.n_controls();
    j["m_geometry"] = rig.m_geometry();
    j["theta"] = vec_to_json(rig.theta());
    if (!rig.control_names().empty()) j["control_names"] = rig.control_names();
    if (const auto* linear = dynamic_cast<const LinearRig*>(&rig)) {
        j["type"] = "linear";
        (void)linear;
        return j;
    }
    if (const auto* joint = dynamic_cast<const JointPsdRig*>(&rig)) {
        j["type"] = "joint_psd";
        j["p_psd"] = joint->p_psd();
        j["psd_spec"] = joint->psd_spec();
        // Nonzeros already live in canonical compressed-column order, so the
        // emitted parallel arrays line up with theta.
        Json rows = Json::array();
        Json cols = Json::array();
        for (int k = 0; k < joint->theta_size(); ++k) {
            rows.push_back(joint->row_idx()[static_cast<std::size_t>(k)]);
            cols.push_back(joint->param_column(k));
        }
        j["sparsity"] = Json{{"rows", rows}, {"cols", cols}};
        return j;
    }
    throw ConfigError("rig_to_json: unsupported rig type");
}

inline std::unique_ptr<Rig> rig_from_json(const Json& j) {
    if (!j.is_object() || !j.contains("type"))
        throw ConfigError("rig_from_json: missing type");
    const std::string type = j.at("type").get<std::string>();
    const int n = j.at("n_controls").get<int>();
    const int m = j.at("m_geometry").get<int>();
    const Vec theta = vec_from_json(j.at("theta"), "rig_from_json: theta");
    std::unique_ptr<Rig> rig;
    if (type == "linear") {
        if (theta.size() != static_cast<Eigen::Index>(n) * m)
            throw ConfigError("rig_from_json: theta size mismatch for linear rig");
        auto r = std::make_unique<LinearRig>(n, m);
        r->set_theta(theta);
        rig = std::move(r);
    } else if (type == "joint_psd") {
        const auto spec = j.at("psd_spec").get<std::vector<std::vector<int>>>();
        const auto rows = j.at("sparsity").at("rows").get<std::vector<int>>();
        const auto cols = j.at("sparsity").at("cols").get<std::vector<int>>();
        if (j.contains("p_psd") && j.at("p_psd").get<int>() != static_cast<int>(spec.size()))
            throw ConfigError("rig_from_json: p_psd disagrees with psd_spec");
        auto r = std::make_unique<JointPsdRig>(n, m, spec, rows, cols, theta);
        rig = std::move(r);
    } else {
        throw ConfigError("rig_from_json: unknown rig type '" + type + "'");
    }
    if (j.contains("control_names"))
        rig->set_control_names(j.at("control_names").get<std::vector<std::string>>());
    return rig;
}

inline void save_rig(const Rig& rig, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("save_rig: cannot open " + path);
    out << rig_to_json(rig).dump(2) << "\n";
}

inline std::unique_ptr<Rig> load_rig(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("load_rig: cannot open " + path);
    Json j;
    try {
        in >> j;
    } catch (const Json::exception& e) {
        throw ConfigError("load_rig: parse error in " + path + ": " + e.what());
    }
    return rig_from_json(j);
}

// ---------------------------------------------------------------------------
// Expression-set files: a list of named control templates.

inline Json expression_set_to_json(const std::vector<ExpressionTemplate>& set) {
    Json arr = Json::array();
    for (const auto& expr : set) {
        Json e;
        e["name"] = expr.name;
        Json controls = Json::object();
        for (const auto& [name, value] : expr.controls) controls[name] = value;
        e["controls"] = controls;
        e["kind"] = pair_kind_name(expr.kind);
        if (expr.weight != 1.0) e["weight"] = expr.weight;
        arr.push_back(std::move(e));
    }
    return arr;
}

inline std::vector<ExpressionTemplate> expression_set_from_json(const Json& arr) {
    if (!arr.is_array()) throw ConfigError("expression set: expected an array");
    std::vector<ExpressionTemplate> set;
    for (const auto& e : arr) {
        ExpressionTemplate t;
        t.name = e.at("name").get<std::string>();
        if (e.contains("kind")) t.kind = pair_kind_from_name(e.at("kind").get<std::string>());
        if (e.contains("weight")) t.weight = e.at("weight").get<double>();
        if (e.contains("controls"))
            for (const auto& [name, value] : e.at("controls").items())
                t.controls.emplace_back(name, value.get<double>());
        set.push_back(std::move(t));
    }
    return set;
}

inline void save_expression_set(const std::vector<ExpressionTemplate>& set,
                                const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("save_expression_set: cannot open " + path);
    out << expression_set_to_json(set).dump(2) << "\n";
}

inline std::vector<ExpressionTemplate> load_expression_set(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("load_expression_set: cannot open " + path);
    Json j;
    try {
        in >> j;
    } catch (const Json::exception& e) {
        throw ConfigError("load_expression_set: parse error in " + path + ": " + e.what());
    }
    return expression_set_from_json(j);
}

// ---------------------------------------------------------------------------
// Geometry captures: geometry vectors keyed by expression name.

inline Json capture_to_json(const std::map<std::string, Vec>& capture) {
    Json j = Json::object();
    for (const auto& [name, v] : capture) j[name] = vec_to_json(v);
    return j;
}

inline std::map<std::string, Vec> capture_from_json(const Json& j) {
    if (!j.is_object()) throw ConfigError("geometry capture: expected an object");
    std::map<std::string, Vec> capture;
    for (const auto& [name, arr] : j.items())
        capture[name] = vec_from_json(arr, "geometry capture '" + name + "'");
    return capture;
}

inline void save_capture(const std::map<std::string, Vec>& capture,
                         const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("save_capture: cannot open " + path);
    out << capture_to_json(capture).dump(2) << "\n";
}

inline std::map<std::string, Vec> load_capture(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("load_capture: cannot open " + path);
    Json j;
    try {
        in >> j;
    } catch (const Json::exception& e) {
        throw ConfigError("load_capture: parse error in " + path + ": " + e.what());
    }
    return capture_from_json(j);
}

}  // namespace rigtune
