#include <gtest/gtest.h>

#include <phrap/scenario.hpp>

#include <cstdlib>

using namespace phrap;
namespace sc = phrap::scenario;
namespace fs = std::filesystem;

namespace {

const fs::path kBundled = PHRAP_SCENARIO_DIR;
const fs::path kData = PHRAP_TEST_DATA_DIR;

// Minimal valid scenario; tests patch it before parsing.
sc::Json base() {
  return sc::Json::parse(R"({
    "id": "t",
    "species": ["Ba138", "Yb171"],
    "trap": {
      "c_y": 0.7, "c_z": 0.3,
      "axial": {"separation_um": 3.5},
      "radial": {"frequency_hz": 2.6e6}
    },
    "waveform": {
      "standard_phrap": {
        "coupling": {"ez_v_per_m": 400},
        "dc_start": 1.0, "dc_cross": 1.79, "dc_end": 2.2,
        "transfer_duration_us": 88, "return_duration_us": 12
      }
    },
    "initial_nbar": {"default": 12, "XSTR": 0.02, "ZSTR": 6.5},
    "experiment": {"type": "transfer"}
  })");
}

std::string schema_path(const sc::Json& j) {
  try {
    (void)sc::parse(j.dump());
  } catch (const SchemaError& e) {
    return e.path;
  }
  return "<accepted>";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("phrap_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(PHRAP_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

bool has_finding(const std::vector<sc::Finding>& f, const std::string& severity, const std::string& text) {
  return std::any_of(f.begin(), f.end(), [&](const sc::Finding& x) {
    return x.severity == severity && x.message.find(text) != std::string::npos;
  });
}

}  // namespace

TEST(Schema, BaseScenarioParses) {
  const sc::Scenario s = sc::parse(base().dump());
  EXPECT_EQ(s.id, "t");
  EXPECT_EQ(s.trap.ions.size(), 2u);
  EXPECT_EQ(s.base_waveform.segments().size(), 3u);
  EXPECT_DOUBLE_EQ(s.initial_nbar.at(ModeLabel::ZSTR), 6.5);
}

TEST(Schema, CommentsAllowed) {
  EXPECT_NO_THROW(sc::parse("// leading\n" + base().dump()));
}

TEST(Schema, LaplaceConstraintNamed) {
  try {
    (void)sc::load(kData / "malformed_laplace.jsonc");
    FAIL() << "accepted c_y + c_z != 1";
  } catch (const SchemaError& e) {
    EXPECT_EQ(e.path, "/trap");
    EXPECT_NE(std::string(e.what()).find("c_y + c_z = 1"), std::string::npos);
  }
}

TEST(Schema, OffendingPathsReported) {
  sc::Json j = base();
  j["trap"]["axial"]["separation_mm"] = 3.5;
  EXPECT_EQ(schema_path(j), "/trap/axial/separation_mm");

  j = base();
  j["initial_nbar"]["QCOM"] = 1.0;
  EXPECT_EQ(schema_path(j), "/initial_nbar/QCOM");

  j = base();
  j["waveform"]["standard_phrap"]["dc_shape"] = "cubic";
  EXPECT_EQ(schema_path(j), "/waveform/standard_phrap/dc_shape");

  j = base();
  j["species"][1] = "Xe131";
  EXPECT_EQ(schema_path(j), "/species/1");

  j = base();
  j["experiment"]["type"] = "teleport";
  EXPECT_EQ(schema_path(j), "/experiment/type");

  j = base();
  j["waveform"]["standard_phrap"].erase("dc_end");
  EXPECT_EQ(schema_path(j), "/waveform/standard_phrap/dc_end");

  j = base();
  j["backend"] = "quantum";
  EXPECT_EQ(schema_path(j), "/backend");

  j = base();
  j["trajectories"] = 1;
  EXPECT_EQ(schema_path(j), "/trajectories");
}

TEST(Schema, SegmentEndpointsCarryOver) {
  sc::Json j = base();
  j["waveform"] = sc::Json::parse(R"({
    "start": {"dc_scale": 1.0, "ey_v_per_m": 50},
    "segments": [
      {"duration_us": 10, "to": {"dc_scale": 1.5}},
      {"duration_us": 5, "to": {"rot_xy_v_per_m2": 1e6}, "tag": "return"}
    ]})");
  const sc::Scenario s = sc::parse(j.dump());
  const auto& segs = s.base_waveform.segments();
  ASSERT_EQ(segs.size(), 2u);
  EXPECT_EQ(segs[1].start, segs[0].end);
  EXPECT_DOUBLE_EQ(segs[1].end.e_field.y(), 50.0);
  EXPECT_DOUBLE_EQ(segs[1].end.dc_scale, 1.5);
  EXPECT_DOUBLE_EQ(segs[1].end.rot_xy, 1e6 * kElementaryCharge);
  EXPECT_EQ(segs[1].tag, "return");
}

TEST(Schema, SequenceStagesMustChain) {
  sc::Json j = base();
  j.erase("waveform");
  const sc::Json w1 = sc::Json::parse(R"({"start": {"dc_scale": 1.0},
      "segments": [{"duration_us": 10, "to": {"dc_scale": 1.2}}]})");
  const sc::Json w2 = sc::Json::parse(R"({"start": {"dc_scale": 1.0},
      "segments": [{"duration_us": 10, "to": {"dc_scale": 1.1}}]})");
  j["experiment"] = {{"type", "permutation_sequence"},
                     {"stages", {{{"name", "a"}, {"waveform", w1}}, {{"name", "b"}, {"waveform", w2}}}}};
  EXPECT_EQ(schema_path(j), "/experiment/stages/1/waveform");
}

TEST(Schema, EveryBundledScenarioParses) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(kBundled)) {
    if (e.path().extension() != ".jsonc") continue;
    ++n;
    EXPECT_NO_THROW({
      const sc::Scenario s = sc::load(e.path());
      EXPECT_EQ(s.id, e.path().stem().string());
    }) << e.path();
  }
  EXPECT_GE(n, 10u);
}

TEST(Checks, PointerMinMaxEquals) {
  sc::OJson r = {{"a", {{"b", 2.0}}}, {"s", "x"}};
  std::vector<sc::Check> c(4);
  c[0].pointer = "/a/b";
  c[0].min = 1.0;
  c[0].max = 3.0;
  c[1].pointer = "/a/b";
  c[1].max = 1.0;
  c[2].pointer = "/s";
  c[2].equals = "x";
  c[3].pointer = "/missing";
  c[3].min = 0.0;
  const auto out = sc::evaluate_checks(c, r);
  EXPECT_TRUE(out[0].pass);
  EXPECT_FALSE(out[1].pass);
  EXPECT_TRUE(out[2].pass);
  EXPECT_FALSE(out[3].pass);
}

TEST(Validate, EmptyWaveformHasIdentityPermutation) {
  const auto f = sc::validate(sc::load(kData / "empty_waveform.jsonc"));
  EXPECT_TRUE(has_finding(f, "ok", "no crossings; identity permutation"));
}

TEST(Validate, CanonicalTransferIsAdiabatic) {
  const auto f = sc::validate(sc::load(kBundled / "transfer.jsonc"));
  EXPECT_TRUE(has_finding(f, "ok", "adiabatic at all crossings"));
  EXPECT_TRUE(has_finding(f, "ok", "return phase fast"));
  EXPECT_FALSE(std::any_of(f.begin(), f.end(), [](auto& x) { return x.severity != "ok"; }));
}

TEST(Validate, TenMicrosecondTransferIsDiabatic) {
  const auto f = sc::validate(sc::load(kBundled / "transfer_10us.jsonc"));
  EXPECT_TRUE(has_finding(f, "warning", "XSTR/ZSTR crossing"));
  EXPECT_FALSE(has_finding(f, "ok", "adiabatic at all crossings"));
}

TEST(Validate, SlowReturnFlaggedForBackphrap) {
  sc::Json j = base();
  j["waveform"]["standard_phrap"]["transfer_duration_us"] = 50;
  j["waveform"]["standard_phrap"]["return_duration_us"] = 400;
  const auto f = sc::validate(sc::parse(j.dump()));
  EXPECT_TRUE(has_finding(f, "warning", "backphrap"));
}

TEST(Validate, ConfinementLossIsAFindingNotAThrow) {
  std::vector<sc::Finding> f;
  EXPECT_NO_THROW(f = sc::validate(sc::load(kData / "deconfined.jsonc")));
  EXPECT_TRUE(has_finding(f, "error", "confinement"));
}

TEST(Run, TraceWritesCsvAndJson) {
  const fs::path d = fresh_dir("trace");
  sc::RunOptions o;
  o.out_dir = d;
  const sc::RunOutcome r = sc::run(sc::load(kBundled / "fig3_trace.jsonc"), o);
  EXPECT_TRUE(r.checks_passed()) << r.report;
  const std::string csv = slurp(d / "fig3_trace_trace.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "time_s,mode_index,freq_hz,label,p0,p1,p2,p3,p4,p5");
  const auto j = sc::Json::parse(slurp(d / "fig3_trace.json"));
  EXPECT_EQ(j["results"]["crossings"].size(), 1u);
  EXPECT_TRUE(fs::exists(d / "fig3_trace_report.txt"));
  EXPECT_TRUE(fs::exists(d / "fig3_trace_timing.json"));
}

TEST(Run, EmptyWaveformIsASchemaError) {
  EXPECT_THROW(sc::run(sc::load(kData / "empty_waveform.jsonc"), {.write_files = false}), SchemaError);
}

TEST(Run, PhysicsErrorCarriesScenarioContext) {
  try {
    (void)sc::run(sc::load(kData / "deconfined.jsonc"), {.write_files = false});
    FAIL();
  } catch (const PhysicsError& e) {
    EXPECT_NE(std::string(e.what()).find("deconfined"), std::string::npos);
  }
}

TEST(Determinism, RerunsAreByteIdentical) {
  // trace plus a small ensemble, run twice with different worker counts
  const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
  for (const char* id : {"fig3_trace", "transfer"}) {
    const sc::Scenario s = sc::load(kBundled / (std::string(id) + ".jsonc"));
    sc::RunOptions o;
    o.trajectories = 6;
    o.out_dir = a;
    o.threads = 1;
    (void)sc::run(s, o);
    o.out_dir = b;
    o.threads = 3;
    (void)sc::run(s, o);
  }
  std::size_t compared = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    const std::string name = e.path().filename().string();
    if (name.find("_timing") != std::string::npos) continue;
    ASSERT_TRUE(fs::exists(b / name)) << name;
    EXPECT_EQ(slurp(e.path()), slurp(b / name)) << name;
    ++compared;
  }
  EXPECT_EQ(compared, 6u);
}

TEST(Determinism, SeedChangesEnsembleResult) {
  const sc::Scenario s = sc::load(kBundled / "transfer.jsonc");
  sc::RunOptions o;
  o.write_files = false;
  o.trajectories = 4;
  o.seed = 1;
  const auto r1 = sc::run(s, o).result.dump();
  o.seed = 2;
  EXPECT_NE(sc::run(s, o).result.dump(), r1);
}

TEST(Cli, ExitCodes) {
  const fs::path d = fresh_dir("cli");
  const std::string out = " --out " + d.string();
  EXPECT_EQ(cli("run --scenario fig3_trace --check" + out), 0);
  EXPECT_EQ(cli("run --scenario " + (kData / "malformed_laplace.jsonc").string() + out), 2);
  EXPECT_EQ(cli("run --scenario " + (kData / "deconfined.jsonc").string() + out), 3);
  // the bundled Ba-Yb magnitude check of the ion-order scenario fails in this model
  EXPECT_EQ(cli("run --scenario appH_order" + out), 0);
  EXPECT_EQ(cli("run --scenario appH_order --check" + out), 4);
  EXPECT_EQ(cli("validate --scenario transfer_10us"), 0);
  EXPECT_EQ(cli("list-scenarios"), 0);
  EXPECT_NE(cli("run --scenario fig3_trace --backend quantum" + out), 0);
}
