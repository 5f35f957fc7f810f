#pragma once

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dynamics.hpp"
#include "spectral.hpp"

namespace phrap::scenario {

using Json = nlohmann::json;
using OJson = nlohmann::ordered_json;

enum class Backend { Linear, Ensemble, Both };

inline std::string to_string(Backend b) {
  switch (b) {
    case Backend::Linear: return "linear";
    case Backend::Ensemble: return "ensemble";
    case Backend::Both: return "both";
  }
  return "linear";
}

inline std::optional<Backend> backend_from_string(const std::string& s) {
  if (s == "linear") return Backend::Linear;
  if (s == "ensemble") return Backend::Ensemble;
  if (s == "both") return Backend::Both;
  return std::nullopt;
}

inline bool uses_linear(Backend b) { return b != Backend::Ensemble; }
inline bool uses_ensemble(Backend b) { return b != Backend::Linear; }

struct Check {
  std::string name;
  std::string pointer;  // JSON pointer into the result record
  std::optional<double> min, max;
  std::optional<Json> equals;
};

struct Stage {
  std::string name;
  Waveform waveform;
  int repeat = 1;
  std::optional<std::string> expect;  // permutation string
};

struct Experiment {
  std::string type;
  std::size_t trace_steps = 600;
  std::optional<double> probe_time;                            // s
  std::optional<std::pair<ModeLabel, ModeLabel>> focus_pair;
  bool compare_reversed_order = false;
  ModeLabel target = ModeLabel::ZSTR;
  std::vector<double> values;  // durations (s), fields (V/m), voltages (V) or quanta
  std::vector<int> axes;       // field sweep directions, 0..2
  double return_fraction = 0.12;
  double nominal_rf_voltage = 0.0;
  double threshold_nbar = 1.0;
  std::vector<Stage> stages;
  CoolingEvent cooling;
  double cooling_duration = 1e-6;
  std::optional<HeatingModel> heating;
  bool simulate = true;
};

struct Scenario {
  std::string id, description;
  double runtime_budget_s = 60.0;
  std::uint64_t seed = 1;
  Backend backend = Backend::Linear;
  std::size_t trajectories = 2000;
  IonTrap trap;
  Waveform base_waveform;                   // before the stray offset
  std::optional<StandardPhrapParams> phrap; // when built from standard_phrap
  ControlField stray;                       // offset added to every control
  std::map<ModeLabel, double> initial_nbar;
  double default_nbar = 0.0;
  Experiment experiment;
  std::vector<Check> checks;
  std::vector<std::string> warnings;

  Waveform waveform() const { return with_offset(base_waveform, stray); }
};

namespace detail {

inline std::string join(const std::string& path, const std::string& key) { return path + "/" + key; }

inline void allow_keys(const Json& o, const std::string& path, const std::set<std::string>& keys) {
  if (!o.is_object()) throw SchemaError(path.empty() ? "/" : path, "expected an object");
  for (auto it = o.begin(); it != o.end(); ++it)
    if (!keys.count(it.key())) throw SchemaError(join(path, it.key()), "unknown key");
}

inline const Json& require(const Json& o, const std::string& path, const std::string& key) {
  if (!o.contains(key)) throw SchemaError(join(path, key), "required key missing");
  return o.at(key);
}

inline double as_number(const Json& v, const std::string& path) {
  if (!v.is_number()) throw SchemaError(path, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw SchemaError(path, "expected a finite number");
  return d;
}

inline double number(const Json& o, const std::string& path, const std::string& key) {
  return as_number(require(o, path, key), join(path, key));
}

inline double number_or(const Json& o, const std::string& path, const std::string& key, double def) {
  return o.contains(key) ? as_number(o.at(key), join(path, key)) : def;
}

inline double positive(const Json& o, const std::string& path, const std::string& key) {
  const double d = number(o, path, key);
  if (!(d > 0.0)) throw SchemaError(join(path, key), "must be positive");
  return d;
}

inline std::string string(const Json& o, const std::string& path, const std::string& key) {
  const Json& v = require(o, path, key);
  if (!v.is_string()) throw SchemaError(join(path, key), "expected a string");
  return v.get<std::string>();
}

inline std::string string_or(const Json& o, const std::string& path, const std::string& key, std::string def) {
  return o.contains(key) ? string(o, path, key) : def;
}

inline std::vector<double> numbers(const Json& o, const std::string& path, const std::string& key) {
  const Json& v = require(o, path, key);
  if (!v.is_array() || v.empty()) throw SchemaError(join(path, key), "expected a non-empty array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_number(v[i], join(join(path, key), std::to_string(i))));
  return out;
}

inline ModeLabel label(const Json& v, const std::string& path) {
  if (!v.is_string()) throw SchemaError(path, "expected a mode label");
  auto l = label_from_string(v.get<std::string>());
  if (!l || *l == ModeLabel::Unlabeled) throw SchemaError(path, "unknown mode label '" + v.get<std::string>() + "'");
  return *l;
}

inline std::vector<ModeLabel> labels(const Json& o, const std::string& path, const std::string& key) {
  const Json& v = require(o, path, key);
  if (!v.is_array()) throw SchemaError(join(path, key), "expected an array of mode labels");
  std::vector<ModeLabel> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(label(v[i], join(join(path, key), std::to_string(i))));
  return out;
}

inline Shape shape(const Json& o, const std::string& path, const std::string& key, Shape def) {
  if (!o.contains(key)) return def;
  const std::string s = string(o, path, key);
  auto sh = shape_from_string(s);
  if (!sh) throw SchemaError(join(path, key), "unknown shape '" + s + "' (linear, smoothstep, sine_squared)");
  return *sh;
}

// Partial control: keys present override `base`. Shim coefficients are given
// either in V/m^2 or relative to the trap's dc_curvature.
inline ControlField control(const Json& o, const std::string& path, ControlField base, double dc_curvature) {
  allow_keys(o, path,
             {"e_v_per_m", "ex_v_per_m", "ey_v_per_m", "ez_v_per_m", "rot_xy_v_per_m2", "rot_xz_v_per_m2",
              "rot_yz_v_per_m2", "split_v_per_m2", "rot_xy_rel_dc", "rot_xz_rel_dc", "rot_yz_rel_dc",
              "split_rel_dc", "dc_scale"});
  if (o.contains("e_v_per_m")) {
    const Json& e = o.at("e_v_per_m");
    if (!e.is_array() || e.size() != 3) throw SchemaError(join(path, "e_v_per_m"), "expected [x, y, z]");
    for (int i = 0; i < 3; ++i) base.e_field(i) = as_number(e[static_cast<std::size_t>(i)], join(path, "e_v_per_m"));
  }
  const char* axes[3] = {"ex_v_per_m", "ey_v_per_m", "ez_v_per_m"};
  for (int i = 0; i < 3; ++i)
    if (o.contains(axes[i])) base.e_field(i) = number(o, path, axes[i]);
  auto shim = [&](const std::string& name, double& dst) {
    const std::string v = name + "_v_per_m2", r = name + "_rel_dc";
    if (o.contains(v) && o.contains(r)) throw SchemaError(join(path, r), "give " + name + " in one unit only");
    if (o.contains(v)) dst = number(o, path, v) * kElementaryCharge;
    if (o.contains(r)) dst = number(o, path, r) * dc_curvature;
  };
  shim("rot_xy", base.rot_xy);
  shim("rot_xz", base.rot_xz);
  shim("rot_yz", base.rot_yz);
  shim("split", base.radial_split_shim);
  if (o.contains("dc_scale")) {
    base.dc_scale = number(o, path, "dc_scale");
    if (!(base.dc_scale > 0.0)) throw SchemaError(join(path, "dc_scale"), "must be positive");
  }
  return base;
}

inline IonSpecies species_entry(const Json& v, const std::string& path) {
  if (v.is_string()) {
    try {
      return species::by_label(v.get<std::string>());
    } catch (const InvalidParameter& e) {
      throw SchemaError(path, e.what());
    }
  }
  allow_keys(v, path, {"label", "mass_amu", "charge_e"});
  IonSpecies s = species::from_amu(positive(v, path, "mass_amu"), string(v, path, "label"));
  s.charge = number_or(v, path, "charge_e", 1.0) * kElementaryCharge;
  if (!(s.charge > 0.0)) throw SchemaError(join(path, "charge_e"), "must be positive");
  return s;
}

inline IonTrap trap(const Json& root) {
  IonTrap t;
  const Json& sp = require(root, "", "species");
  if (!sp.is_array() || sp.empty()) throw SchemaError("/species", "expected a non-empty array");
  for (std::size_t i = 0; i < sp.size(); ++i) t.ions.push_back(species_entry(sp[i], "/species/" + std::to_string(i)));

  const std::string path = "/trap";
  const Json& o = require(root, "", "trap");
  allow_keys(o, path, {"c_y", "c_z", "axial", "radial", "comment"});
  t.config.c_y = number(o, path, "c_y");
  t.config.c_z = number(o, path, "c_z");
  if (std::abs(t.config.c_y + t.config.c_z - 1.0) > 1e-12) {
    std::ostringstream msg;
    msg << "constraint c_y + c_z = 1 violated (c_y + c_z = " << t.config.c_y + t.config.c_z << ")";
    throw SchemaError(path, msg.str());
  }

  auto ref_species = [&](const Json& a, const std::string& p) {
    return a.contains("reference_species") ? species_entry(a.at("reference_species"), join(p, "reference_species"))
                                           : species::yb171();
  };

  const std::string ap = join(path, "axial");
  const Json& ax = require(o, path, "axial");
  allow_keys(ax, ap, {"separation_um", "frequency_hz", "reference_species", "dc_curvature_v_per_m2"});
  if (ax.contains("separation_um"))
    t.config.dc_curvature = calibration::dc_curvature_for_separation(positive(ax, ap, "separation_um") * 1e-6);
  else if (ax.contains("frequency_hz"))
    t.config.dc_curvature =
        calibration::dc_curvature_for_axial_frequency(ref_species(ax, ap), hz_to_rad(positive(ax, ap, "frequency_hz")));
  else if (ax.contains("dc_curvature_v_per_m2"))
    t.config.dc_curvature = positive(ax, ap, "dc_curvature_v_per_m2") * kElementaryCharge;
  else
    throw SchemaError(ap, "give separation_um, frequency_hz or dc_curvature_v_per_m2");

  const std::string rp = join(path, "radial");
  const Json& rad = require(o, path, "radial");
  allow_keys(rad, rp, {"frequency_hz", "direction", "reference_species", "rf_curvature_scale_j_kg_per_m2"});
  if (rad.contains("frequency_hz")) {
    const std::string dir = string_or(rad, rp, "direction", "y");
    if (dir != "y" && dir != "z") throw SchemaError(join(rp, "direction"), "must be \"y\" or \"z\"");
    const double c = dir == "y" ? t.config.c_y : t.config.c_z;
    t.config.rf_curvature_scale = calibration::rf_scale_for_radial_frequency(
        ref_species(rad, rp), hz_to_rad(positive(rad, rp, "frequency_hz")), t.config.dc_curvature, c);
  } else if (rad.contains("rf_curvature_scale_j_kg_per_m2")) {
    t.config.rf_curvature_scale = positive(rad, rp, "rf_curvature_scale_j_kg_per_m2");
  } else {
    throw SchemaError(rp, "give frequency_hz or rf_curvature_scale_j_kg_per_m2");
  }
  try {
    t.validate();
  } catch (const InvalidParameter& e) {
    throw SchemaError(path, e.what());
  }
  return t;
}

inline StandardPhrapParams phrap_params(const Json& o, const std::string& path, double dc) {
  allow_keys(o, path,
             {"base", "coupling", "dc_start", "dc_cross", "dc_end", "transfer_duration_us", "return_duration_us",
              "coupling_shape", "dc_shape", "return_dc_shape"});
  StandardPhrapParams p;
  if (o.contains("base")) p.base = control(o.at("base"), join(path, "base"), ControlField{}, dc);
  p.coupling = control(require(o, path, "coupling"), join(path, "coupling"), ControlField{}, dc);
  p.dc_start = positive(o, path, "dc_start");
  p.dc_cross = number_or(o, path, "dc_cross", 0.0);
  p.dc_end = positive(o, path, "dc_end");
  p.transfer_duration = positive(o, path, "transfer_duration_us") * 1e-6;
  p.return_duration = positive(o, path, "return_duration_us") * 1e-6;
  p.coupling_shape = shape(o, path, "coupling_shape", Shape::SineSquared);
  p.dc_shape = shape(o, path, "dc_shape", Shape::Linear);
  p.return_dc_shape = shape(o, path, "return_dc_shape", Shape::SineSquared);
  return p;
}

// Explicit segment list; every "to" overrides the previous end point.
inline Waveform segments(const Json& o, const std::string& path, double dc) {
  allow_keys(o, path, {"start", "segments"});
  ControlField cur = o.contains("start") ? control(o.at("start"), join(path, "start"), ControlField{}, dc) : ControlField{};
  const Json& segs = require(o, path, "segments");
  if (!segs.is_array()) throw SchemaError(join(path, "segments"), "expected an array");
  Waveform w;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    const std::string sp = join(join(path, "segments"), std::to_string(i));
    const Json& s = segs[i];
    allow_keys(s, sp, {"duration_us", "to", "shape", "dc_shape", "tag", "comment"});
    Segment seg;
    seg.duration = positive(s, sp, "duration_us") * 1e-6;
    seg.start = cur;
    seg.end = s.contains("to") ? control(s.at("to"), join(sp, "to"), cur, dc) : cur;
    seg.shape = shape(s, sp, "shape", Shape::SineSquared);
    seg.dc_shape = shape(s, sp, "dc_shape", Shape::Linear);
    seg.tag = string_or(s, sp, "tag", "");
    cur = seg.end;
    w.append(std::move(seg));
  }
  return w;
}

inline Waveform waveform(const Json& o, const std::string& path, double dc, std::optional<StandardPhrapParams>* phrap,
                         std::vector<std::string>* warnings) {
  if (!o.is_object()) throw SchemaError(path, "expected an object");
  if (o.contains("standard_phrap")) {
    allow_keys(o, path, {"standard_phrap"});
    const StandardPhrapParams p = phrap_params(o.at("standard_phrap"), join(path, "standard_phrap"), dc);
    if (phrap) *phrap = p;
    try {
      return standard_phrap(p, warnings);
    } catch (const WaveformError& e) {
      throw SchemaError(join(path, "standard_phrap"), e.what());
    }
  }
  try {
    return segments(o, path, dc);
  } catch (const WaveformError& e) {
    throw SchemaError(path, e.what());
  }
}

inline Check check(const Json& o, const std::string& path) {
  allow_keys(o, path, {"name", "pointer", "min", "max", "equals"});
  Check c;
  c.pointer = string(o, path, "pointer");
  try {
    (void)Json::json_pointer(c.pointer);
  } catch (const std::exception&) {
    throw SchemaError(join(path, "pointer"), "not a JSON pointer");
  }
  c.name = string_or(o, path, "name", c.pointer);
  if (o.contains("min")) c.min = number(o, path, "min");
  if (o.contains("max")) c.max = number(o, path, "max");
  if (o.contains("equals")) c.equals = o.at("equals");
  if (!c.min && !c.max && !c.equals) throw SchemaError(path, "a check needs min, max or equals");
  return c;
}

inline int axis(const Json& v, const std::string& path) {
  if (v == "x") return 0;
  if (v == "y") return 1;
  if (v == "z") return 2;
  throw SchemaError(path, "expected \"x\", \"y\" or \"z\"");
}

inline Experiment experiment(const Json& o, const std::string& path, const Scenario& sc) {
  Experiment e;
  e.type = string(o, path, "type");
  const double dc = sc.trap.config.dc_curvature;
  auto target = [&]() {
    if (o.contains("target_mode")) e.target = label(o.at("target_mode"), join(path, "target_mode"));
  };
  auto needs_phrap = [&]() {
    if (!sc.phrap) throw SchemaError("/waveform", e.type + " needs a standard_phrap waveform");
  };
  if (e.type == "trace") {
    allow_keys(o, path, {"type", "steps", "probe_time_us", "focus_pair", "compare_reversed_order"});
    e.trace_steps = static_cast<std::size_t>(number_or(o, path, "steps", 600));
    if (e.trace_steps < 2) throw SchemaError(join(path, "steps"), "needs at least 2 steps");
    if (o.contains("probe_time_us")) e.probe_time = number(o, path, "probe_time_us") * 1e-6;
    if (o.contains("focus_pair")) {
      const auto l = labels(o, path, "focus_pair");
      if (l.size() != 2) throw SchemaError(join(path, "focus_pair"), "expected two mode labels");
      e.focus_pair = std::make_pair(l[0], l[1]);
    }
    if (o.contains("compare_reversed_order")) e.compare_reversed_order = o.at("compare_reversed_order").get<bool>();
  } else if (e.type == "transfer") {
    allow_keys(o, path, {"type", "steps"});
    e.trace_steps = static_cast<std::size_t>(number_or(o, path, "steps", 600));
  } else if (e.type == "duration_sweep") {
    allow_keys(o, path, {"type", "durations_us", "return_fraction", "target_mode"});
    needs_phrap();
    for (double d : numbers(o, path, "durations_us")) {
      if (!(d > 0.0)) throw SchemaError(join(path, "durations_us"), "durations must be positive");
      e.values.push_back(d * 1e-6);
    }
    e.return_fraction = number_or(o, path, "return_fraction", 0.12);
    if (!(e.return_fraction > 0.0 && e.return_fraction < 1.0))
      throw SchemaError(join(path, "return_fraction"), "must lie in (0, 1)");
    target();
  } else if (e.type == "field_tolerance_sweep") {
    allow_keys(o, path, {"type", "axes", "fields_v_per_m", "target_mode", "threshold_nbar"});
    const Json& ax = require(o, path, "axes");
    if (!ax.is_array() || ax.empty()) throw SchemaError(join(path, "axes"), "expected a non-empty array");
    for (std::size_t i = 0; i < ax.size(); ++i) e.axes.push_back(axis(ax[i], join(join(path, "axes"), std::to_string(i))));
    e.values = numbers(o, path, "fields_v_per_m");
    e.threshold_nbar = number_or(o, path, "threshold_nbar", 1.0);
    target();
  } else if (e.type == "rf_tolerance_sweep") {
    allow_keys(o, path, {"type", "rf_voltages_v", "nominal_rf_voltage_v", "target_mode", "threshold_nbar"});
    e.values = numbers(o, path, "rf_voltages_v");
    for (double v : e.values)
      if (!(v > 0.0)) throw SchemaError(join(path, "rf_voltages_v"), "voltages must be positive");
    e.nominal_rf_voltage = positive(o, path, "nominal_rf_voltage_v");
    e.threshold_nbar = number_or(o, path, "threshold_nbar", 1.0);
    target();
  } else if (e.type == "breakdown_sweep") {
    allow_keys(o, path, {"type", "initial_target_nbar", "target_mode"});
    e.values = numbers(o, path, "initial_target_nbar");
    for (double v : e.values)
      if (!(v >= 0.0)) throw SchemaError(join(path, "initial_target_nbar"), "occupancies must be non-negative");
    target();
  } else if (e.type == "permutation_sequence") {
    allow_keys(o, path, {"type", "stages", "cooling", "heating", "simulate", "steps"});
    e.trace_steps = static_cast<std::size_t>(number_or(o, path, "steps", 600));
    if (o.contains("simulate")) e.simulate = o.at("simulate").get<bool>();
    const Json& st = require(o, path, "stages");
    if (!st.is_array() || st.empty()) throw SchemaError(join(path, "stages"), "expected a non-empty array");
    for (std::size_t i = 0; i < st.size(); ++i) {
      const std::string sp = join(join(path, "stages"), std::to_string(i));
      allow_keys(st[i], sp, {"name", "waveform", "repeat", "expect", "comment"});
      Stage s;
      s.name = string_or(st[i], sp, "name", "stage" + std::to_string(i));
      s.waveform = waveform(require(st[i], sp, "waveform"), join(sp, "waveform"), dc, nullptr, nullptr);
      if (s.waveform.empty()) throw SchemaError(join(sp, "waveform"), "stage waveform is empty");
      s.repeat = static_cast<int>(number_or(st[i], sp, "repeat", 1));
      if (s.repeat < 1) throw SchemaError(join(sp, "repeat"), "must be at least 1");
      if (st[i].contains("expect")) s.expect = string(st[i], sp, "expect");
      if (!e.stages.empty() && !(e.stages.back().waveform.final() == s.waveform.initial()))
        throw SchemaError(join(sp, "waveform"), "stage does not start where the previous stage ends");
      if (s.repeat > 1 && !(s.waveform.final() == s.waveform.initial()))
        throw SchemaError(join(sp, "repeat"), "a repeated stage must end where it starts");
      e.stages.push_back(std::move(s));
    }
    if (o.contains("cooling")) {
      const std::string cp = join(path, "cooling");
      const Json& c = o.at("cooling");
      allow_keys(c, cp, {"modes", "nbar", "duration_us"});
      e.cooling.modes = labels(c, cp, "modes");
      e.cooling.nbar = number_or(c, cp, "nbar", 0.05);
      e.cooling_duration = number_or(c, cp, "duration_us", 1.0) * 1e-6;
      if (!(e.cooling_duration > 0.0)) throw SchemaError(join(cp, "duration_us"), "must be positive");
    }
    if (o.contains("heating") && !o.at("heating").is_null()) {
      const std::string hp = join(path, "heating");
      const Json& h = o.at("heating");
      allow_keys(h, hp, {"quanta", "modes"});
      HeatingModel m;
      m.quanta = number_or(h, hp, "quanta", 0.15);
      if (h.contains("modes")) m.modes = labels(h, hp, "modes");
      e.heating = m;
    }
  } else {
    throw SchemaError(join(path, "type"),
                      "unknown experiment type '" + e.type +
                          "' (trace, transfer, duration_sweep, field_tolerance_sweep, rf_tolerance_sweep, "
                          "breakdown_sweep, permutation_sequence)");
  }
  return e;
}

}  // namespace detail

// Reads a scenario from JSON text; comments are allowed. Throws SchemaError
// naming the offending path.
inline Scenario parse(const std::string& text) {
  Json root;
  try {
    root = Json::parse(text, nullptr, true, true);
  } catch (const Json::parse_error& e) {
    throw SchemaError("/", std::string("not valid JSON: ") + e.what());
  }
  using namespace detail;
  allow_keys(root, "",
             {"id", "description", "runtime_budget_s", "seed", "backend", "trajectories", "species", "trap", "waveform",
              "stray", "initial_nbar", "experiment", "checks"});
  Scenario sc;
  sc.id = string(root, "", "id");
  if (sc.id.empty() || sc.id.find_first_of("/\\ ") != std::string::npos)
    throw SchemaError("/id", "must be a non-empty name without slashes or spaces");
  sc.description = string_or(root, "", "description", "");
  sc.runtime_budget_s = number_or(root, "", "runtime_budget_s", 60.0);
  if (root.contains("seed")) {
    if (!root.at("seed").is_number_unsigned()) throw SchemaError("/seed", "expected an unsigned integer");
    sc.seed = root.at("seed").get<std::uint64_t>();
  }
  if (root.contains("backend")) {
    auto b = backend_from_string(string(root, "", "backend"));
    if (!b) throw SchemaError("/backend", "expected linear, ensemble or both");
    sc.backend = *b;
  }
  if (root.contains("trajectories")) {
    const double n = number(root, "", "trajectories");
    if (!(n >= 2.0) || n != std::floor(n)) throw SchemaError("/trajectories", "must be an integer of at least 2");
    sc.trajectories = static_cast<std::size_t>(n);
  }
  sc.trap = trap(root);
  const double dc = sc.trap.config.dc_curvature;
  if (root.contains("waveform")) sc.base_waveform = waveform(root.at("waveform"), "/waveform", dc, &sc.phrap, &sc.warnings);
  if (root.contains("stray")) {
    sc.stray = control(root.at("stray"), "/stray", ControlField{}, dc);
    if (root.at("stray").contains("dc_scale")) throw SchemaError("/stray/dc_scale", "a stray offset has no dc_scale");
  }
  if (root.contains("initial_nbar")) {
    const Json& n = root.at("initial_nbar");
    if (!n.is_object()) throw SchemaError("/initial_nbar", "expected an object");
    for (auto it = n.begin(); it != n.end(); ++it) {
      const std::string p = "/initial_nbar/" + it.key();
      const double v = as_number(it.value(), p);
      if (!(v >= 0.0)) throw SchemaError(p, "occupancies must be non-negative");
      if (it.key() == "default") {
        sc.default_nbar = v;
      } else {
        sc.initial_nbar[label(Json(it.key()), p)] = v;
      }
    }
  }
  sc.experiment = experiment(require(root, "", "experiment"), "/experiment", sc);
  if (sc.experiment.type != "permutation_sequence" && !root.contains("waveform"))
    throw SchemaError("/waveform", "required key missing");
  if (root.contains("checks")) {
    const Json& c = root.at("checks");
    if (!c.is_array()) throw SchemaError("/checks", "expected an array");
    for (std::size_t i = 0; i < c.size(); ++i) sc.checks.push_back(check(c[i], "/checks/" + std::to_string(i)));
  }
  return sc;
}

inline Scenario load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw SchemaError("/", "cannot read scenario file " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

namespace detail {

// Label keys in ascending-frequency order; repeated labels get a suffix.
inline std::vector<std::string> mode_keys(const ModeSpectrum& s) {
  std::vector<std::string> keys;
  for (std::size_t m = 0; m < s.size(); ++m) {
    std::string k = to_string(s.labels[m]);
    if (std::count(s.labels.begin(), s.labels.end(), s.labels[m]) > 1) k += "_" + std::to_string(m);
    keys.push_back(k);
  }
  return keys;
}

inline OJson per_mode(const ModeSpectrum& s, const Eigen::VectorXd& v) {
  OJson o = OJson::object();
  const auto keys = mode_keys(s);
  for (std::size_t m = 0; m < keys.size(); ++m) o[keys[m]] = v(static_cast<Eigen::Index>(m));
  return o;
}

inline ModeSpectrum spectrum_at(const IonTrap& trap, const ControlField& f) {
  return normal_modes(trap, f, solve_equilibrium(trap, f));
}

inline ThermalState initial_state(const Scenario& sc, const IonTrap& trap, const ControlField& f,
                                  std::optional<std::pair<ModeLabel, double>> override_mode = std::nullopt) {
  const ModeSpectrum s = spectrum_at(trap, f);
  Eigen::VectorXd nb = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(s.size()), sc.default_nbar);
  auto set = [&](ModeLabel l, double v) {
    auto m = s.find(l);
    if (!m) throw SchemaError("/initial_nbar/" + to_string(l), "mode does not exist in the initial well");
    nb(static_cast<Eigen::Index>(*m)) = v;
  };
  for (const auto& [l, v] : sc.initial_nbar) set(l, v);
  if (override_mode) set(override_mode->first, override_mode->second);
  return ThermalState::thermal(s, nb);
}

struct DynamicsRun {
  std::optional<LinearResult> linear;
  std::optional<EnsembleResult> ensemble;
};

struct RunContext {
  Backend backend;
  std::uint64_t seed;
  std::size_t trajectories;
  unsigned threads;
};

inline DynamicsRun run_dynamics(const IonTrap& trap, const Waveform& w, const ThermalState& in, const RunContext& ctx,
                                Backend backend, const Events& events = {}) {
  DynamicsRun r;
  if (uses_linear(backend)) {
    LinearOptions o;
    o.events = events;
    r.linear = propagate_linear(trap, w, in, o);
  }
  if (uses_ensemble(backend)) {
    EnsembleOptions o;
    o.trajectories = ctx.trajectories;
    o.seed = ctx.seed;
    o.threads = ctx.threads;
    o.events = events;
    r.ensemble = propagate_ensemble(trap, w, in, o);
  }
  return r;
}

inline OJson dynamics_json(const DynamicsRun& r) {
  OJson o = OJson::object();
  if (r.linear) {
    OJson l = OJson::object();
    l["final_nbar"] = per_mode(r.linear->final.spectrum, r.linear->final.nbar);
    l["symplectic_error"] = r.linear->map.symplectic_error();
    l["steps"] = r.linear->steps;
    o["linear"] = l;
  }
  if (r.ensemble) {
    OJson e = OJson::object();
    e["final_nbar"] = per_mode(r.ensemble->final.spectrum, r.ensemble->final.nbar);
    e["stderr"] = per_mode(r.ensemble->final.spectrum, r.ensemble->final.nbar_stderr);
    e["trajectories"] = r.ensemble->trajectories;
    e["max_static_energy_drift"] = r.ensemble->max_static_energy_drift;
    o["ensemble"] = e;
  }
  if (r.linear && r.ensemble) {
    // largest |linear - ensemble| in units of the ensemble standard error
    double z = 0.0;
    const auto& a = r.linear->final.nbar;
    const auto& b = r.ensemble->final.nbar;
    const auto& se = r.ensemble->final.nbar_stderr;
    for (Eigen::Index m = 0; m < a.size(); ++m) z = std::max(z, std::abs(a(m) - b(m)) / std::max(se(m), 1e-12));
    o["agreement"] = OJson{{"max_abs_z", z}};
  }
  return o;
}

inline OJson crossing_json(const CrossingReport& c) {
  OJson o = OJson::object();
  o["modes"] = to_string(c.label_m) + "/" + to_string(c.label_n);
  o["uncoupled_time_us"] = c.uncoupled_time * 1e6;
  o["time_min_gap_us"] = c.time_min_gap * 1e6;
  o["gap_hz"] = rad_to_hz(c.min_gap);
  o["sweep_rate_rad_per_s2"] = c.sweep_rate;
  try {
    const AdiabaticityReport a = adiabaticity_report(c);
    o["transfer_probability"] = a.transfer_probability;
    o["theta_rate_margin"] = a.theta_rate_margin;
  } catch (const DegenerateSweepError&) {
    o["transfer_probability"] = nullptr;
    o["theta_rate_margin"] = nullptr;
  }
  return o;
}

inline bool same_pair(const CrossingReport& c, std::pair<ModeLabel, ModeLabel> p) {
  return (c.label_m == p.first && c.label_n == p.second) || (c.label_m == p.second && c.label_n == p.first);
}

struct TraceBundle {
  SpectrumTrace coupled, bare;
  std::vector<CrossingReport> crossings;
  std::optional<Permutation> permutation;
  std::string permutation_error;
};

inline TraceBundle trace_all(const IonTrap& trap, const Waveform& w, std::size_t steps) {
  TraceBundle b;
  TraceOptions opt;
  opt.base_steps = steps;
  b.coupled = trace_spectrum(trap, w, opt);
  b.bare = trace_spectrum(trap, uncoupled(w), opt);
  b.crossings = find_crossings(b.coupled, b.bare);
  try {
    b.permutation = predict_permutation(b.coupled, b.bare);
  } catch (const CouplingNotClosedError& e) {
    b.permutation_error = e.what();
  }
  return b;
}

inline OJson permutation_json(const TraceBundle& b) {
  OJson o = OJson::object();
  o["closed"] = b.permutation.has_value();
  if (b.permutation) {
    o["cycles"] = b.permutation->to_string();
    OJson map = OJson::object();
    for (std::size_t i = 0; i < b.permutation->target.size(); ++i)
      map[to_string(b.permutation->labels[i])] = to_string(b.permutation->labels[b.permutation->target[i]]);
    o["map"] = map;
  } else {
    o["reason"] = b.permutation_error;
  }
  return o;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

// RFC-4180 table with scientific notation.
struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  static std::string num(double v) {
    std::ostringstream s;
    s << std::scientific << std::setprecision(12) << v;
    return s.str();
  }
  std::string str() const {
    std::ostringstream s;
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) s << (i ? "," : "") << r[i];
      s << "\n";
    };
    line(header);
    for (const auto& r : rows) line(r);
    return s.str();
  }
};

}  // namespace detail

struct RunOptions {
  std::filesystem::path out_dir = ".";
  std::optional<Backend> backend;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> trajectories;
  unsigned threads = 0;
  bool write_files = true;
};

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct RunOutcome {
  OJson result;
  std::vector<CheckResult> checks;
  std::vector<std::filesystem::path> files;
  std::string report;
  double runtime_s = 0.0;
  bool within_budget = true;

  bool checks_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
  }
};

inline std::vector<CheckResult> evaluate_checks(const std::vector<Check>& checks, const OJson& result) {
  std::vector<CheckResult> out;
  for (const Check& c : checks) {
    CheckResult r;
    r.name = c.name;
    const OJson::json_pointer ptr(c.pointer);
    if (!result.contains(ptr)) {
      r.detail = "missing " + c.pointer;
      out.push_back(r);
      continue;
    }
    const OJson& v = result.at(ptr);
    r.pass = true;
    std::ostringstream d;
    d << c.pointer << " = " << v.dump();
    if (c.equals) {
      const bool eq = OJson::parse(c.equals->dump()) == v;
      r.pass = r.pass && eq;
      d << (eq ? " == " : " != ") << c.equals->dump();
    }
    if (c.min || c.max) {
      if (!v.is_number()) {
        r.pass = false;
        d << " (not a number)";
      } else {
        const double x = v.get<double>();
        if (c.min) {
          r.pass = r.pass && x >= *c.min;
          d << ", min " << *c.min;
        }
        if (c.max) {
          r.pass = r.pass && x <= *c.max;
          d << ", max " << *c.max;
        }
      }
    }
    r.detail = d.str();
    out.push_back(r);
  }
  return out;
}

namespace detail {

inline OJson run_trace(const Scenario& sc, const IonTrap& trap, const Waveform& w, std::vector<std::pair<std::string, std::string>>& files,
                       std::vector<std::string>& report) {
  const Experiment& e = sc.experiment;
  OJson o = OJson::object();
  const TraceBundle b = trace_all(trap, w, e.trace_steps);
  std::ostringstream c1, c2;
  write_trace_csv(c1, b.coupled);
  write_trace_csv(c2, b.bare);
  files.emplace_back(sc.id + "_trace.csv", c1.str());
  files.emplace_back(sc.id + "_trace_uncoupled.csv", c2.str());

  o["steps"] = b.coupled.steps();
  o["base_step_us"] = w.total_duration() / static_cast<double>(e.trace_steps) * 1e6;
  o["initial_frequencies_hz"] = per_mode(b.coupled.spectra.front(), b.coupled.spectra.front().omega / kTwoPi);
  OJson xs = OJson::array();
  for (const auto& c : b.crossings) xs.push_back(crossing_json(c));
  o["crossings"] = xs;
  o["permutation"] = permutation_json(b);
  report.push_back("trace: " + std::to_string(b.coupled.steps()) + " steps, " + std::to_string(b.crossings.size()) +
                   " crossings");
  for (const auto& c : b.crossings) {
    std::ostringstream s;
    s << "  " << to_string(c.label_m) << "/" << to_string(c.label_n) << " at " << std::setprecision(4)
      << c.uncoupled_time * 1e6 << " us, gap 2pi x " << rad_to_hz(c.min_gap) / 1e3 << " kHz";
    report.push_back(s.str());
  }
  report.push_back("permutation: " + (b.permutation ? b.permutation->to_string() : "open (" + b.permutation_error + ")"));

  if (e.probe_time) {
    const ControlField f = w.sample(*e.probe_time);
    const CrystalConfiguration c = solve_equilibrium(trap, f);
    OJson p = OJson::object();
    p["time_us"] = *e.probe_time * 1e6;
    OJson ions = OJson::array();
    for (std::size_t j = 0; j < trap.size(); ++j) {
      const Eigen::Vector3d r = c.equilibrium.ion(j);
      ions.push_back(OJson{{"species", trap.ions[j].label},
                           {"x_um", r.x() * 1e6},
                           {"y_um", r.y() * 1e6},
                           {"z_um", r.z() * 1e6},
                           {"radial_offset_um", std::hypot(r.y(), r.z()) * 1e6}});
    }
    p["ions"] = ions;
    p["frequencies_hz"] = per_mode(normal_modes(trap, f, c), normal_modes(trap, f, c).omega / kTwoPi);
    o["probe"] = p;
  }
  auto focus_gap = [&](const std::vector<CrossingReport>& xs2) -> OJson {
    for (const auto& c : xs2)
      if (same_pair(c, *e.focus_pair)) return rad_to_hz(c.min_gap);
    return nullptr;
  };
  if (e.focus_pair) {
    o["focus_gap_hz"] = focus_gap(b.crossings);
    o["focus_gap_uncoupled_hz"] = focus_gap(find_crossings(b.bare, b.bare));
  }
  if (e.compare_reversed_order) {
    IonTrap rev = trap;
    std::reverse(rev.ions.begin(), rev.ions.end());
    const TraceBundle r = trace_all(rev, w, e.trace_steps);
    OJson ro = OJson::object();
    ro["species"] = OJson::array();
    for (const auto& s : rev.ions) ro["species"].push_back(s.label);
    OJson rx = OJson::array();
    for (const auto& c : r.crossings) rx.push_back(crossing_json(c));
    ro["crossings"] = rx;
    ro["permutation"] = permutation_json(r);
    if (e.focus_pair) {
      ro["focus_gap_hz"] = focus_gap(r.crossings);
      if (o["focus_gap_hz"].is_number() && ro["focus_gap_hz"].is_number())
        o["order_gap_ratio"] = o["focus_gap_hz"].get<double>() / ro["focus_gap_hz"].get<double>();
    }
    o["reversed_order"] = ro;
  }
  return o;
}

inline OJson run_transfer(const Scenario& sc, const IonTrap& trap, const Waveform& w, const RunContext& ctx,
                          std::vector<std::string>& report) {
  OJson o = OJson::object();
  const ThermalState in = initial_state(sc, trap, w.initial());
  o["initial_nbar"] = per_mode(in.spectrum, in.nbar);
  const TraceBundle b = trace_all(trap, w, sc.experiment.trace_steps);
  OJson xs = OJson::array();
  for (const auto& c : b.crossings) xs.push_back(crossing_json(c));
  o["crossings"] = xs;
  o["permutation"] = permutation_json(b);
  const DynamicsRun r = run_dynamics(trap, w, in, ctx, ctx.backend);
  o.update(dynamics_json(r));
  if (r.linear) {
    std::ostringstream s;
    s << "linear final nbar:";
    for (auto& [k, v] : o["linear"]["final_nbar"].items()) s << " " << k << "=" << std::setprecision(4) << v.get<double>();
    report.push_back(s.str());
  }
  if (r.ensemble) {
    std::ostringstream s;
    s << "ensemble final nbar:";
    for (auto& [k, v] : o["ensemble"]["final_nbar"].items())
      s << " " << k << "=" << std::setprecision(4) << v.get<double>() << "+-" << o["ensemble"]["stderr"][k].get<double>();
    report.push_back(s.str());
  }
  return o;
}

inline double target_value(const ThermalState& t, ModeLabel l) { return nbar_of(t, l); }

// Runs one sweep point with every selected backend; returns per-backend target n.
inline OJson sweep_point(const Scenario& sc, const IonTrap& trap, const Waveform& w, const RunContext& ctx,
                         Csv& csv, const std::vector<std::string>& lead,
                         std::optional<std::pair<ModeLabel, double>> override_mode = std::nullopt) {
  const ThermalState in = initial_state(sc, trap, w.initial(), override_mode);
  const DynamicsRun r = run_dynamics(trap, w, in, ctx, ctx.backend);
  OJson p = OJson::object();
  std::vector<std::string> row = lead;
  if (r.linear) {
    p["linear"] = per_mode(r.linear->final.spectrum, r.linear->final.nbar);
    row.push_back(Csv::num(target_value(r.linear->final, sc.experiment.target)));
  }
  if (r.ensemble) {
    p["ensemble"] = per_mode(r.ensemble->final.spectrum, r.ensemble->final.nbar);
    p["ensemble_stderr"] = per_mode(r.ensemble->final.spectrum, r.ensemble->final.nbar_stderr);
    row.push_back(Csv::num(target_value(r.ensemble->final, sc.experiment.target)));
    row.push_back(Csv::num(stderr_of(r.ensemble->final, sc.experiment.target)));
  }
  csv.rows.push_back(row);
  const ThermalState& best = r.linear ? r.linear->final : r.ensemble->final;
  p["target_nbar"] = target_value(best, sc.experiment.target);
  return p;
}

inline void sweep_header(Csv& csv, Backend b, std::vector<std::string> lead, ModeLabel target) {
  const std::string t = to_string(target);
  if (uses_linear(b)) lead.push_back("linear_nbar_" + t);
  if (uses_ensemble(b)) {
    lead.push_back("ensemble_nbar_" + t);
    lead.push_back("ensemble_stderr_" + t);
  }
  csv.header = lead;
}

inline OJson run_duration_sweep(const Scenario& sc, const IonTrap& trap, const RunContext& ctx,
                                std::vector<std::pair<std::string, std::string>>& files,
                                std::vector<std::string>& report) {
  const Experiment& e = sc.experiment;
  Csv csv;
  sweep_header(csv, ctx.backend, {"duration_us"}, e.target);
  OJson pts = OJson::array(), tv = OJson::array();
  for (double d : e.values) {
    StandardPhrapParams p = *sc.phrap;
    p.transfer_duration = d * (1.0 - e.return_fraction);
    p.return_duration = d * e.return_fraction;
    const Waveform w = with_offset(standard_phrap(p), sc.stray);
    OJson pt = sweep_point(sc, trap, w, ctx, csv, {Csv::num(d * 1e6)});
    pt["duration_us"] = d * 1e6;
    tv.push_back(pt["target_nbar"]);
    pts.push_back(pt);
  }
  files.emplace_back(sc.id + "_duration_sweep.csv", csv.str());
  OJson o = OJson::object();
  o["target_mode"] = to_string(e.target);
  OJson ds = OJson::array();
  for (double d : e.values) ds.push_back(d * 1e6);
  o["durations_us"] = ds;
  o["target_nbar"] = tv;
  o["points"] = pts;
  report.push_back("duration sweep over " + std::to_string(e.values.size()) + " durations");
  return o;
}

// Smallest |value| at which the target reaches the threshold, per sign.
inline OJson threshold_json(const std::vector<double>& x, const std::vector<double>& y, double thr) {
  OJson o = OJson::object();
  std::optional<double> neg, pos;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (y[i] < thr) continue;
    if (x[i] < 0 && (!neg || -x[i] < *neg)) neg = -x[i];
    if (x[i] >= 0 && (!pos || x[i] < *pos)) pos = x[i];
  }
  o["negative"] = neg ? OJson(*neg) : OJson(nullptr);
  o["positive"] = pos ? OJson(*pos) : OJson(nullptr);
  return o;
}

// Nondecreasing in |x| separately on each side of zero.
inline bool monotone_in_abs(const std::vector<double>& x, const std::vector<double>& y, double slack) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  for (std::size_t k = 0; k + 1 < idx.size(); ++k) {
    const std::size_t a = idx[k], b = idx[k + 1];
    if (x[a] >= 0 && x[b] >= 0 && y[b] < y[a] - slack) return false;
    if (x[a] < 0 && x[b] <= 0 && y[a] < y[b] - slack) return false;
  }
  return true;
}

inline OJson run_field_sweep(const Scenario& sc, const IonTrap& trap, const RunContext& ctx,
                             std::vector<std::pair<std::string, std::string>>& files, std::vector<std::string>& report) {
  const Experiment& e = sc.experiment;
  Csv csv;
  sweep_header(csv, ctx.backend, {"axis", "field_v_per_m"}, e.target);
  OJson o = OJson::object();
  o["target_mode"] = to_string(e.target);
  o["threshold_nbar"] = e.threshold_nbar;
  for (int a : e.axes) {
    const std::string name(1, "xyz"[a]);
    std::vector<double> y;
    OJson pts = OJson::array();
    for (double v : e.values) {
      ControlField stray = sc.stray;
      stray.e_field(a) += v;
      const Waveform w = with_offset(sc.base_waveform, stray);
      OJson pt = sweep_point(sc, trap, w, ctx, csv, {name, Csv::num(v)});
      y.push_back(pt["target_nbar"].get<double>());
      pts.push_back(pt);
    }
    OJson ax = OJson::object();
    ax["fields_v_per_m"] = e.values;
    ax["target_nbar"] = y;
    ax["spread"] = *std::max_element(y.begin(), y.end()) - *std::min_element(y.begin(), y.end());
    ax["monotone_in_abs_field"] = monotone_in_abs(e.values, y, 1e-6);
    ax["threshold_v_per_m"] = threshold_json(e.values, y, e.threshold_nbar);
    ax["points"] = pts;
    o[name] = ax;
    std::ostringstream s;
    s << "E_" << name << " sweep: target spread " << std::setprecision(3) << ax["spread"].get<double>() << " quanta";
    report.push_back(s.str());
  }
  files.emplace_back(sc.id + "_field_sweep.csv", csv.str());
  return o;
}

inline OJson run_rf_sweep(const Scenario& sc, const IonTrap& trap, const RunContext& ctx,
                          std::vector<std::pair<std::string, std::string>>& files, std::vector<std::string>& report) {
  const Experiment& e = sc.experiment;
  Csv csv;
  sweep_header(csv, ctx.backend, {"rf_voltage_v", "zstr_frequency_hz"}, e.target);
  OJson pts = OJson::array();
  std::vector<double> y;
  const Waveform w = sc.waveform();
  for (double v : e.values) {
    IonTrap t = trap;
    t.config.rf_curvature_scale *= (v / e.nominal_rf_voltage) * (v / e.nominal_rf_voltage);
    const ModeSpectrum s0 = spectrum_at(t, w.initial());
    const double ft = s0.find(e.target) ? s0.frequency_hz(*s0.find(e.target)) : 0.0;
    OJson pt = sweep_point(sc, t, w, ctx, csv, {Csv::num(v), Csv::num(ft)});
    pt["rf_voltage_v"] = v;
    pt["initial_target_frequency_hz"] = ft;
    y.push_back(pt["target_nbar"].get<double>());
    pts.push_back(pt);
  }
  files.emplace_back(sc.id + "_rf_sweep.csv", csv.str());
  OJson o = OJson::object();
  o["target_mode"] = to_string(e.target);
  o["rf_voltages_v"] = e.values;
  o["target_nbar"] = y;
  std::vector<double> dv;
  for (double v : e.values) dv.push_back(v - e.nominal_rf_voltage);
  o["threshold_offset_v"] = threshold_json(dv, y, e.threshold_nbar);
  o["points"] = pts;
  report.push_back("rf sweep over " + std::to_string(e.values.size()) + " voltages");
  return o;
}

inline OJson run_breakdown(const Scenario& sc, const IonTrap& trap, const RunContext& ctx,
                           std::vector<std::pair<std::string, std::string>>& files, std::vector<std::string>& report) {
  const Experiment& e = sc.experiment;
  Csv csv;
  sweep_header(csv, ctx.backend, {"initial_nbar"}, e.target);
  const Waveform w = sc.waveform();
  OJson pts = OJson::array();
  std::vector<double> lin, ens, ens_se;
  for (double n0 : e.values) {
    OJson pt = sweep_point(sc, trap, w, ctx, csv, {Csv::num(n0)}, std::make_pair(e.target, n0));
    pt["initial_target_nbar"] = n0;
    const std::string key = to_string(e.target);
    if (pt.contains("linear")) lin.push_back(pt["linear"][key].get<double>());
    if (pt.contains("ensemble")) {
      ens.push_back(pt["ensemble"][key].get<double>());
      ens_se.push_back(pt["ensemble_stderr"][key].get<double>());
      pt["ensemble_removed_fraction"] = n0 > 0 ? 1.0 - ens.back() / n0 : 0.0;
    }
    pts.push_back(pt);
  }
  files.emplace_back(sc.id + "_breakdown.csv", csv.str());
  OJson o = OJson::object();
  o["target_mode"] = to_string(e.target);
  o["initial_target_nbar"] = e.values;
  if (!lin.empty()) {
    o["linear_final"] = lin;
    // share of each added initial quantum left behind; constant in a linear model
    OJson f = OJson::array();
    for (std::size_t i = 1; i < lin.size(); ++i)
      f.push_back((lin[i] - lin[0]) / (e.values[i] - e.values[0]));
    o["linear_retained_fraction"] = f;
    if (!f.empty()) {
      double lo = f[0].get<double>(), hi = lo;
      for (const auto& v : f) lo = std::min(lo, v.get<double>()), hi = std::max(hi, v.get<double>());
      o["linear_retained_fraction_spread"] = hi - lo;
    }
  }
  if (!ens.empty()) {
    o["ensemble_final"] = ens;
    o["ensemble_stderr"] = ens_se;
    const std::size_t hot = static_cast<std::size_t>(std::max_element(e.values.begin(), e.values.end()) - e.values.begin());
    if (!lin.empty()) {
      // anharmonic excess over the linear prediction
      OJson ex = OJson::array();
      for (std::size_t i = 0; i < ens.size(); ++i) ex.push_back(ens[i] - lin[i]);
      o["ensemble_excess_over_linear"] = ex;
    }
    o["ensemble_removed_fraction_at_max"] = e.values[hot] > 0 ? 1.0 - ens[hot] / e.values[hot] : 0.0;
  }
  o["points"] = pts;
  report.push_back("breakdown sweep over " + std::to_string(e.values.size()) + " initial occupancies");
  return o;
}

inline OJson run_sequence(const Scenario& sc, const IonTrap& trap, const RunContext& ctx,
                          std::vector<std::string>& report) {
  const Experiment& e = sc.experiment;
  OJson o = OJson::object();
  OJson stages = OJson::array();
  bool all = true;
  Waveform full;
  for (const Stage& s : e.stages) {
    const TraceBundle b = trace_all(trap, s.waveform, e.trace_steps);
    OJson so = OJson::object();
    so["name"] = s.name;
    so["repeat"] = s.repeat;
    so["permutation"] = permutation_json(b);
    const std::string got = b.permutation ? b.permutation->to_string() : "open";
    if (s.expect) {
      so["expected"] = *s.expect;
      so["matches"] = got == *s.expect;
      all = all && got == *s.expect;
    }
    OJson xs = OJson::array();
    for (const auto& c : b.crossings) xs.push_back(crossing_json(c));
    so["crossings"] = xs;
    stages.push_back(so);
    report.push_back("stage " + s.name + ": " + got);
    for (int k = 0; k < s.repeat; ++k) {
      full.append(s.waveform);
      if (e.simulate) full.append(Waveform::hold(s.waveform.final(), e.cooling_duration, "cool"));
    }
  }
  o["stages"] = stages;
  o["all_permutations_match"] = all;
  if (e.simulate && !full.empty()) {
    const Waveform w = with_offset(full, sc.stray);
    const ThermalState in = initial_state(sc, trap, w.initial());
    o["initial_nbar"] = per_mode(in.spectrum, in.nbar);
    Events ev;
    ev.cooling.push_back(e.cooling);
    ev.heating = e.heating;
    const DynamicsRun r = run_dynamics(trap, w, in, ctx, ctx.backend, ev);
    o.update(dynamics_json(r));
    const ThermalState& best = r.linear ? r.linear->final : r.ensemble->final;
    double worst = 0.0;
    for (ModeLabel l : {ModeLabel::YSTR, ModeLabel::ZSTR, ModeLabel::YCOM, ModeLabel::ZCOM})
      if (best.spectrum.find(l)) worst = std::max(worst, nbar_of(best, l));
    o["max_radial_nbar"] = worst;
    std::ostringstream s;
    s << "cooling cycle: largest final radial nbar " << std::setprecision(3) << worst;
    report.push_back(s.str());
  }
  return o;
}

}  // namespace detail

// Executes the scenario's experiment and (optionally) writes the result
// record, CSV tables, a text report and a timing file under out_dir.
inline RunOutcome run(const Scenario& sc, const RunOptions& opt = {}) {
  using namespace detail;
  const auto t0 = std::chrono::steady_clock::now();
  RunContext ctx{opt.backend.value_or(sc.backend), opt.seed.value_or(sc.seed),
                 opt.trajectories.value_or(sc.trajectories), opt.threads};
  if (ctx.trajectories < 2) throw SchemaError("/trajectories", "must be at least 2");
  if (sc.experiment.type != "permutation_sequence" && sc.base_waveform.empty())
    throw SchemaError("/waveform/segments", "nothing to run: the waveform is empty");

  RunOutcome out;
  std::vector<std::pair<std::string, std::string>> files;
  std::vector<std::string> report;
  OJson r = OJson::object();
  r["scenario"] = sc.id;
  r["description"] = sc.description;
  r["experiment"] = sc.experiment.type;
  r["backend"] = to_string(ctx.backend);
  r["seed"] = ctx.seed;
  r["trajectories"] = uses_ensemble(ctx.backend) ? OJson(ctx.trajectories) : OJson(nullptr);
  OJson sp = OJson::array();
  for (const auto& s : sc.trap.ions) sp.push_back(s.label);
  r["species"] = sp;
  r["warnings"] = sc.warnings;

  try {
    const std::string& type = sc.experiment.type;
    OJson res;
    if (type == "trace") res = run_trace(sc, sc.trap, sc.waveform(), files, report);
    else if (type == "transfer") res = run_transfer(sc, sc.trap, sc.waveform(), ctx, report);
    else if (type == "duration_sweep") res = run_duration_sweep(sc, sc.trap, ctx, files, report);
    else if (type == "field_tolerance_sweep") res = run_field_sweep(sc, sc.trap, ctx, files, report);
    else if (type == "rf_tolerance_sweep") res = run_rf_sweep(sc, sc.trap, ctx, files, report);
    else if (type == "breakdown_sweep") res = run_breakdown(sc, sc.trap, ctx, files, report);
    else res = run_sequence(sc, sc.trap, ctx, report);
    r["results"] = res;
  } catch (const PhysicsError& e) {
    throw PhysicsError("scenario " + sc.id + ": " + e.what());
  }

  out.checks = evaluate_checks(sc.checks, r);
  OJson cj = OJson::array();
  for (const auto& c : out.checks) cj.push_back(OJson{{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
  r["checks"] = cj;
  out.result = r;

  out.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.within_budget = out.runtime_s <= sc.runtime_budget_s;

  std::ostringstream rep;
  rep << "scenario " << sc.id << " (" << sc.experiment.type << ", backend " << to_string(ctx.backend) << ")\n";
  if (!sc.description.empty()) rep << sc.description << "\n";
  for (const auto& w : sc.warnings) rep << "warning: " << w << "\n";
  for (const auto& l : report) rep << l << "\n";
  for (const auto& c : out.checks) rep << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
  out.report = rep.str();

  if (opt.write_files) {
    std::filesystem::create_directories(opt.out_dir);
    files.emplace_back(sc.id + ".json", r.dump(2) + "\n");
    files.emplace_back(sc.id + "_report.txt", out.report);
    for (const auto& [name, content] : files) {
      write_text(opt.out_dir / name, content);
      out.files.push_back(opt.out_dir / name);
    }
    // kept apart so the result files stay byte-identical across reruns
    OJson timing{{"scenario", sc.id}, {"runtime_s", out.runtime_s}, {"budget_s", sc.runtime_budget_s},
                 {"within_budget", out.within_budget}};
    write_text(opt.out_dir / (sc.id + "_timing.json"), timing.dump(2) + "\n");
    out.files.push_back(opt.out_dir / (sc.id + "_timing.json"));
  }
  return out;
}

struct Finding {
  std::string severity;  // "ok", "warning" or "error"
  std::string message;
};

namespace detail {

inline void lint_waveform(const IonTrap& trap, const Waveform& w, const std::string& name, std::size_t steps,
                          std::vector<Finding>& out) {
  const std::string pre = name.empty() ? "" : name + ": ";
  if (w.empty()) {
    out.push_back({"ok", pre + "no crossings; identity permutation"});
    return;
  }
  {
    std::ostringstream m;
    m << pre << "waveform continuous, " << w.segments().size() << " segment" << (w.segments().size() == 1 ? "" : "s")
      << ", " << w.total_duration() * 1e6 << " us";
    out.push_back({"ok", m.str()});
  }
  TraceBundle b;
  try {
    b = trace_all(trap, w, steps);
  } catch (const PhysicsError& e) {
    out.push_back({"error", pre + "confinement or equilibrium failure: " + e.what()});
    return;
  }
  out.push_back({"ok", pre + "confinement holds throughout"});
  std::size_t coupled = 0, flagged = 0;
  for (const auto& c : b.crossings) {
    if (!(c.min_gap > 0.0)) continue;
    const std::string pair = to_string(c.label_m) + "/" + to_string(c.label_n);
    ++coupled;
    double p = 0.0;
    try {
      p = adiabaticity_report(c).transfer_probability;
    } catch (const DegenerateSweepError&) {
      continue;
    }
    // exact crossings (gap at numerical zero) are diabatic by design
    if (rad_to_hz(c.min_gap) < 1.0) {
      --coupled;
      continue;
    }
    if (p < 0.99) {
      ++flagged;
      std::ostringstream s;
      s << pre << pair << " crossing at " << std::setprecision(4) << c.uncoupled_time * 1e6
        << " us is diabatic: transfer probability " << p << " (gap 2pi x " << rad_to_hz(c.min_gap) / 1e3 << " kHz)";
      out.push_back({"warning", s.str()});
    }
  }
  if (coupled == 0)
    out.push_back({"ok", pre + (b.permutation && b.permutation->is_identity() ? "no crossings; identity permutation"
                                                                             : "no coupled crossings")});
  else if (flagged == 0)
    out.push_back({"ok", pre + "adiabatic at all crossings"});
  if (b.permutation)
    out.push_back({"ok", pre + "predicted permutation " + b.permutation->to_string()});
  else
    out.push_back({"warning", pre + "coupling does not close: " + b.permutation_error});

  // return phases under a stray radial field: a backphrap above 1% is flagged
  std::vector<std::pair<double, double>> ret;
  for (std::size_t i = 0; i < w.segments().size(); ++i)
    if (w.segments()[i].tag == "return")
      ret.emplace_back(w.segment_start(i), w.segment_start(i) + w.segments()[i].duration);
  if (ret.empty()) return;
  ControlField stray;
  stray.e_field = {0.0, 10.0, 10.0};
  TraceBundle s;
  try {
    s = trace_all(trap, with_offset(w, stray), steps);
  } catch (const PhysicsError& e) {
    out.push_back({"error", pre + "stray-field trace failed: " + e.what()});
    return;
  }
  bool clean = true;
  for (const auto& c : s.crossings) {
    const bool in_return = std::any_of(ret.begin(), ret.end(), [&](auto& r) {
      return c.uncoupled_time >= r.first && c.uncoupled_time <= r.second;
    });
    if (!in_return || !(c.min_gap > 0.0)) continue;
    const double p = adiabaticity_report(c).transfer_probability;
    if (p > 0.01) {
      clean = false;
      std::ostringstream m;
      m << pre << "return is slow for a 10 V/m stray field: " << to_string(c.label_m) << "/" << to_string(c.label_n)
        << " backphrap probability " << std::setprecision(3) << p;
      out.push_back({"warning", m.str()});
    }
  }
  if (clean) out.push_back({"ok", pre + "return phase fast against 10 V/m stray fields"});
}

}  // namespace detail

// Dry run: confinement, continuity and adiabaticity lint. Never throws for
// physics problems; they become findings.
inline std::vector<Finding> validate(const Scenario& sc) {
  std::vector<Finding> out;
  for (const auto& w : sc.warnings) out.push_back({"warning", w});
  try {
    if (sc.experiment.type == "permutation_sequence") {
      for (const Stage& s : sc.experiment.stages)
        detail::lint_waveform(sc.trap, with_offset(s.waveform, sc.stray), s.name, sc.experiment.trace_steps, out);
    } else {
      const Waveform w = sc.waveform();
      if (!w.empty()) {
        try {
          (void)detail::initial_state(sc, sc.trap, w.initial());
        } catch (const SchemaError& e) {
          out.push_back({"error", e.what()});
        }
      }
      detail::lint_waveform(sc.trap, w, "", sc.experiment.trace_steps, out);
    }
  } catch (const PhysicsError& e) {
    out.push_back({"error", e.what()});
  }
  return out;
}

}  // namespace phrap::scenario
