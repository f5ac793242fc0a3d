#pragma once

#include <cstdio>
#include <cstdlib>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "dba/problem.hpp"

namespace dba {

namespace detail {

// Whitespace-separated token reader with 1-based line tracking for error
// messages.
class TokenReader {
 public:
  explicit TokenReader(std::istream& in) : in_(in) {}

  std::int64_t line() const { return line_; }

  std::string next_token() {
    int c = in_.get();
    while (c != EOF && std::isspace(c)) {
      if (c == '\n') ++line_;
      c = in_.get();
    }
    if (c == EOF) throw ParseError("unexpected end of input", line_);
    std::string tok;
    while (c != EOF && !std::isspace(c)) {
      tok.push_back(static_cast<char>(c));
      c = in_.get();
    }
    if (c == '\n') in_.unget();
    return tok;
  }

  std::int64_t next_int() {
    const std::string tok = next_token();
    char* end = nullptr;
    errno = 0;
    const long long v = std::strtoll(tok.c_str(), &end, 10);
    if (end != tok.c_str() + tok.size() || errno == ERANGE)
      throw ParseError("expected integer, got '" + tok + "'", line_);
    return v;
  }

  double next_real() {
    const std::string tok = next_token();
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size())
      throw ParseError("expected number, got '" + tok + "'", line_);
    if (!std::isfinite(v))
      throw ParseError("non-finite value '" + tok + "'", line_);
    return v;
  }

 private:
  std::istream& in_;
  std::int64_t line_ = 1;
};

}  // namespace detail

/// Parses a BAL-format problem:
///   num_cameras num_points num_observations
///   num_observations x (cam_idx pt_idx px py)
///   num_cameras x 9 scalars (rotation 3, translation 3, focal, k1, k2)
///   num_points x 3 scalars
/// Numbers are stored at the requested precision. Indices are validated
/// against the declared counts; errors carry the offending line number.
/// Non-positive focal lengths produce a warning, not a rejection.
template <typename Scalar>
BAProblem<Scalar> parse_bal(std::istream& in,
                            std::vector<std::string>* warnings = nullptr) {
  detail::TokenReader reader(in);
  const std::int64_t num_cameras = reader.next_int();
  const std::int64_t num_points = reader.next_int();
  const std::int64_t num_observations = reader.next_int();
  if (num_cameras < 0 || num_points < 0 || num_observations < 0)
    throw ParseError("negative count in header", reader.line());

  struct RawObs {
    std::int32_t cam, pt;
    Scalar px, py;
  };
  std::vector<RawObs> obs;
  obs.reserve(static_cast<std::size_t>(num_observations));
  for (std::int64_t i = 0; i < num_observations; ++i) {
    const std::int64_t cam = reader.next_int();
    const std::int64_t pt = reader.next_int();
    if (cam < 0 || cam >= num_cameras)
      throw ParseError("camera index " + std::to_string(cam) +
                           " out of range [0, " + std::to_string(num_cameras) +
                           ")",
                       reader.line());
    if (pt < 0 || pt >= num_points)
      throw ParseError("point index " + std::to_string(pt) +
                           " out of range [0, " + std::to_string(num_points) +
                           ")",
                       reader.line());
    const Scalar px = static_cast<Scalar>(reader.next_real());
    const Scalar py = static_cast<Scalar>(reader.next_real());
    obs.push_back({static_cast<std::int32_t>(cam),
                   static_cast<std::int32_t>(pt), px, py});
  }

  BAProblem<Scalar> problem;
  for (std::int64_t i = 0; i < num_cameras; ++i) {
    CameraState<Scalar> c;
    for (int j = 0; j < 3; ++j)
      c.rotation[j] = static_cast<Scalar>(reader.next_real());
    for (int j = 0; j < 3; ++j)
      c.translation[j] = static_cast<Scalar>(reader.next_real());
    c.focal = static_cast<Scalar>(reader.next_real());
    c.k1 = static_cast<Scalar>(reader.next_real());
    c.k2 = static_cast<Scalar>(reader.next_real());
    problem.add_node(c);
  }
  for (std::int64_t i = 0; i < num_points; ++i) {
    PointState<Scalar> p;
    for (int j = 0; j < 3; ++j)
      p.position[j] = static_cast<Scalar>(reader.next_real());
    problem.add_node(p);
  }
  for (const RawObs& o : obs) {
    Observation<Scalar> edge;
    edge.camera_id = o.cam;
    edge.point_id = o.pt;
    edge.pixel = Eigen::Matrix<Scalar, 2, 1>(o.px, o.py);
    problem.add_edge(edge);
  }

  if (warnings) {
    auto w = problem.validate();
    warnings->insert(warnings->end(), w.begin(), w.end());
  }
  return problem;
}

namespace detail {

inline void append_real(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.16e", v);
  out += buf;
}

}  // namespace detail

/// Emits the same BAL text format parse_bal reads, with 17 significant digits
/// so that parse -> serialize -> parse round-trips to identical values.
template <typename Scalar>
void serialize_bal(const BAProblem<Scalar>& problem, std::ostream& out) {
  std::string buf;
  buf.reserve(1 << 16);
  buf += std::to_string(problem.num_cameras());
  buf += ' ';
  buf += std::to_string(problem.num_points());
  buf += ' ';
  buf += std::to_string(problem.num_observations());
  buf += '\n';
  for (const auto& o : problem.observations()) {
    buf += std::to_string(o.camera_id);
    buf += ' ';
    buf += std::to_string(o.point_id);
    buf += ' ';
    detail::append_real(buf, static_cast<double>(o.pixel.x()));
    buf += ' ';
    detail::append_real(buf, static_cast<double>(o.pixel.y()));
    buf += '\n';
    if (buf.size() > (1 << 16) - 128) {
      out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
      buf.clear();
    }
  }
  for (const auto& c : problem.cameras()) {
    const double params[kCameraParams] = {
        static_cast<double>(c.rotation[0]),    static_cast<double>(c.rotation[1]),
        static_cast<double>(c.rotation[2]),    static_cast<double>(c.translation[0]),
        static_cast<double>(c.translation[1]), static_cast<double>(c.translation[2]),
        static_cast<double>(c.focal),          static_cast<double>(c.k1),
        static_cast<double>(c.k2)};
    for (double v : params) {
      detail::append_real(buf, v);
      buf += '\n';
    }
    if (buf.size() > (1 << 16) - 512) {
      out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
      buf.clear();
    }
  }
  for (const auto& p : problem.points()) {
    for (int j = 0; j < 3; ++j) {
      detail::append_real(buf, static_cast<double>(p.position[j]));
      buf += '\n';
    }
    if (buf.size() > (1 << 16) - 512) {
      out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
      buf.clear();
    }
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

}  // namespace dba
