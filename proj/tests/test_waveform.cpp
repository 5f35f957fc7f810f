#include <gtest/gtest.h>

#include <phrap/waveform.hpp>

using namespace phrap;

namespace {

ControlField field(double ey, double ez, double dc) {
  ControlField f;
  f.e_field = {0, ey, ez};
  f.dc_scale = dc;
  return f;
}

StandardPhrapParams lab_params() {
  StandardPhrapParams p;
  p.coupling.e_field.z() = 400.0;
  p.dc_start = 1.0;
  p.dc_cross = 1.79;
  p.dc_end = 2.2;
  p.transfer_duration = 88e-6;
  p.return_duration = 12e-6;
  return p;
}

}  // namespace

TEST(Sample, SineSquaredEndpointsAndMidpoint) {
  Segment s{10e-6, field(0, 0, 1.0), field(400, -120, 3.0), Shape::SineSquared, Shape::SineSquared, ""};
  Waveform w({s});
  EXPECT_EQ(w.sample(0.0), s.start);
  EXPECT_EQ(w.sample(10e-6), s.end);
  const ControlField mid = w.sample(5e-6);
  EXPECT_NEAR(mid.e_field.y(), 200.0, 1e-12);
  EXPECT_NEAR(mid.e_field.z(), -60.0, 1e-12);
  EXPECT_NEAR(mid.dc_scale, 2.0, 1e-15);
}

TEST(Sample, LinearQuarterPoint) {
  Waveform w({Segment{4e-6, field(0, 0, 1.0), field(100, 0, 2.0), Shape::Linear, Shape::Linear, ""}});
  const ControlField q = w.sample(1e-6);
  EXPECT_NEAR(q.e_field.y(), 25.0, 1e-12);
  EXPECT_NEAR(q.dc_scale, 1.25, 1e-15);
}

TEST(Sample, SmoothstepIsFlatAtEnds) {
  EXPECT_EQ(shape_weight(Shape::Smoothstep, 0.5), 0.5);
  const double h = 1e-6;
  EXPECT_LT(shape_weight(Shape::Smoothstep, h) / h, 1e-5);
  EXPECT_LT(shape_weight(Shape::SineSquared, h) / h, 1e-5);
  EXPECT_NEAR((1 - shape_weight(Shape::SineSquared, 1 - h)) / h, 0.0, 1e-5);
}

TEST(Sample, OutOfRangeTimeThrows) {
  Waveform w = Waveform::hold(ControlField{}, 1e-6);
  EXPECT_THROW(w.sample(-1e-12), WaveformError);
  EXPECT_THROW(w.sample(1.1e-6), WaveformError);
}

TEST(Waveform, ContinuousAcrossBoundaries) {
  Waveform w = Waveform::hold(field(0, 0, 1.0), 1e-6);
  w.then(3e-6, field(50, 10, 1.7)).then(2e-6, field(0, 0, 1.0), Shape::Smoothstep, Shape::Smoothstep);
  EXPECT_EQ(w.sample(1e-6), field(0, 0, 1.0));
  EXPECT_EQ(w.sample(4e-6), field(50, 10, 1.7));
  const double eps = 1e-15;
  const ControlField a = w.sample(4e-6 - eps), b = w.sample(4e-6 + eps);
  EXPECT_NEAR(a.e_field.y(), b.e_field.y(), 1e-6);
  EXPECT_NEAR(a.dc_scale, b.dc_scale, 1e-8);
  EXPECT_DOUBLE_EQ(w.total_duration(), 6e-6);
  EXPECT_EQ(w.sample(6e-6), field(0, 0, 1.0));
}

TEST(Waveform, RejectsDiscontinuityAndBadDuration) {
  Waveform w = Waveform::hold(field(0, 0, 1.0), 1e-6);
  EXPECT_THROW(w.append(Segment{1e-6, field(1, 0, 1.0), field(1, 0, 1.0)}), WaveformError);
  EXPECT_THROW(w.then(0.0, field(0, 0, 1.0)), WaveformError);
  EXPECT_THROW(w.then(-1.0, field(0, 0, 1.0)), WaveformError);
}

TEST(StandardPhrap, CouplingIsOffDuringReturn) {
  std::vector<std::string> warnings;
  const Waveform w = standard_phrap(lab_params(), &warnings);
  EXPECT_TRUE(warnings.empty());
  ASSERT_EQ(w.segments().size(), 3u);
  EXPECT_DOUBLE_EQ(w.total_duration(), 100e-6);
  const Segment& ret = w.segments()[2];
  EXPECT_EQ(ret.tag, "return");
  for (double t = 88e-6; t <= 100e-6; t += 1e-6) EXPECT_EQ(w.sample(t).e_field.norm(), 0.0);
  EXPECT_EQ(w.sample(44e-6).e_field.z(), 400.0);
  EXPECT_EQ(w.sample(44e-6).dc_scale, 1.79);
  EXPECT_EQ(w.sample(88e-6).dc_scale, 2.2);
  EXPECT_EQ(w.sample(100e-6).dc_scale, 1.0);
}

TEST(StandardPhrap, SlowReturnWarns) {
  StandardPhrapParams p = lab_params();
  p.return_duration = p.transfer_duration;
  std::vector<std::string> warnings;
  standard_phrap(p, &warnings);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(StandardPhrap, ZeroCouplingIsBareCompression) {
  StandardPhrapParams p = lab_params();
  p.coupling = ControlField{};
  const Waveform w = standard_phrap(p);
  EXPECT_EQ(uncoupled(w).segments().size(), w.segments().size());
  for (int i = 0; i <= 200; ++i) {
    const double t = 100e-6 * i / 200.0;
    const ControlField f = w.sample(t);
    EXPECT_EQ(f, strip_coupling(f));
    EXPECT_EQ(f.e_field.norm(), 0.0);
  }
}

TEST(StandardPhrap, ReversedTransferRoundTripReturnsToStart) {
  const Waveform full = standard_phrap(lab_params());
  Waveform transfer({full.segments()[0], full.segments()[1]});
  Waveform round = transfer;
  round.append(transfer.reversed());
  EXPECT_EQ(round.sample(round.total_duration()).dc_scale, 1.0);
  EXPECT_EQ(round.sample(round.total_duration()), round.sample(0.0));
  // the reversed half retraces the forward half
  for (double t : {3e-6, 20e-6, 61e-6}) {
    const ControlField a = transfer.sample(t);
    const ControlField b = round.sample(round.total_duration() - t);
    EXPECT_NEAR(a.dc_scale, b.dc_scale, 1e-12);
    EXPECT_NEAR(a.e_field.z(), b.e_field.z(), 1e-9);
  }
}

TEST(Waveform, UncoupledKeepsAxialControls) {
  ControlField f = field(200, 300, 2.0);
  f.e_field.x() = 15;
  f.rot_xy = 1e-12;
  f.radial_split_shim = 2e-12;
  const ControlField g = strip_coupling(f);
  EXPECT_EQ(g.e_field.x(), 15);
  EXPECT_EQ(g.e_field.y(), 0);
  EXPECT_EQ(g.rot_xy, 0);
  EXPECT_EQ(g.radial_split_shim, 2e-12);
  EXPECT_EQ(g.dc_scale, 2.0);
}
