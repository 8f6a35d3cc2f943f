#pragma once

// Synthetic scenes: textured planes and boxes seen by a moving pinhole camera.
// Images are rendered by casting one ray per pixel centre and evaluating a
// procedural world-space texture, so every view of a surface point has the
// same radiance (up to the per-frame gain and bias).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dcov/ba.hpp"
#include "dcov/errors.hpp"
#include "dcov/geometry.hpp"
#include "dcov/image.hpp"
#include "dcov/json_util.hpp"

namespace dcov {

struct ScenePlane {
  /// Points X with normal . X = offset (world frame).
  Eigen::Vector3d normal = Eigen::Vector3d(0, 0, 1);
  double offset = 2.0;
};

struct SceneBox {
  Eigen::Vector3d min = Eigen::Vector3d(-0.2, -0.2, 1.5);
  Eigen::Vector3d max = Eigen::Vector3d(0.2, 0.2, 1.9);
};

struct SceneSpec {
  Intrinsics camera{100, 100, 63.5, 47.5, 128, 96};
  int frames = 2;
  /// Camera centre of frame k is start + k * step; its orientation is
  /// yaw(k * yaw_deg) * pitch(k * pitch_deg) relative to looking down +z.
  Eigen::Vector3d start = Eigen::Vector3d::Zero();
  Eigen::Vector3d step = Eigen::Vector3d(0.01, 0, 0);
  double yaw_deg = 0.0;
  double pitch_deg = 0.0;
  std::vector<ScenePlane> planes{ScenePlane{}};
  std::vector<SceneBox> boxes;
  int texture_components = 12;
  double min_wavelength = 0.05;
  double max_wavelength = 0.4;
  double contrast = 0.25;
  /// Per-frame intensity gain and bias: I = gain * L + bias. Missing entries
  /// default to 1 and 0.
  std::vector<double> gains;
  std::vector<double> biases;
  double image_noise = 0.0;
  int track_count = 100;
  double track_noise_px = 0.0;
  double track_margin_px = 2.0;
  std::uint64_t seed = 0;

  void validate() const {
    camera.validate();
    if (frames < 1) throw ConfigError("scene needs at least one frame");
    if (planes.empty() && boxes.empty()) throw ConfigError("scene needs at least one surface");
    for (const auto& p : planes) {
      if (!(p.normal.norm() > 0) || !p.normal.allFinite() || !std::isfinite(p.offset)) {
        throw ConfigError("scene plane needs a finite non-zero normal");
      }
    }
    for (const auto& b : boxes) {
      if (!((b.max - b.min).array() > 0).all()) throw ConfigError("scene box needs max > min");
    }
    if (texture_components < 1 || !(min_wavelength > 0) || !(max_wavelength >= min_wavelength)) {
      throw ConfigError("invalid scene texture");
    }
    if (!(contrast >= 0) || !(image_noise >= 0) || !(track_noise_px >= 0) || !(track_margin_px >= 0)) {
      throw ConfigError("scene noise levels must be non-negative");
    }
    if (track_count < 0) throw ConfigError("scene track count must be non-negative");
    if (static_cast<int>(gains.size()) > frames || static_cast<int>(biases.size()) > frames) {
      throw ConfigError("more gains or biases than frames");
    }
    for (double g : gains) {
      if (!(g > 0)) throw ConfigError("scene gains must be positive");
    }
  }
};

inline SceneSpec scene_spec_from_json(const json::Json& j) {
  using json::read;
  SceneSpec s;
  json::reject_unknown(j, "scene", {"camera", "frames", "trajectory", "planes", "boxes", "texture", "gains",
                                    "biases", "image_noise", "tracks", "seed"});
  if (j.contains("camera")) {
    const auto& c = j["camera"];
    json::reject_unknown(c, "scene.camera", {"width", "height", "fx", "fy", "cx", "cy"});
    read(c, "width", s.camera.width, "scene.camera");
    read(c, "height", s.camera.height, "scene.camera");
    read(c, "fx", s.camera.fx, "scene.camera");
    read(c, "fy", s.camera.fy, "scene.camera");
    s.camera.cx = 0.5 * (s.camera.width - 1);
    s.camera.cy = 0.5 * (s.camera.height - 1);
    read(c, "cx", s.camera.cx, "scene.camera");
    read(c, "cy", s.camera.cy, "scene.camera");
  }
  read(j, "frames", s.frames, "scene");
  if (j.contains("trajectory")) {
    const auto& t = j["trajectory"];
    json::reject_unknown(t, "scene.trajectory", {"start", "step", "yaw_deg", "pitch_deg"});
    json::read_vec3(t, "start", s.start, "scene.trajectory");
    json::read_vec3(t, "step", s.step, "scene.trajectory");
    read(t, "yaw_deg", s.yaw_deg, "scene.trajectory");
    read(t, "pitch_deg", s.pitch_deg, "scene.trajectory");
  }
  if (j.contains("planes")) {
    if (!j["planes"].is_array()) throw ConfigError("scene.planes: expected an array");
    s.planes.clear();
    for (const auto& p : j["planes"]) {
      json::reject_unknown(p, "scene.planes[]", {"normal", "offset"});
      ScenePlane plane;
      json::read_vec3(p, "normal", plane.normal, "scene.planes[]");
      read(p, "offset", plane.offset, "scene.planes[]");
      s.planes.push_back(plane);
    }
  }
  if (j.contains("boxes")) {
    if (!j["boxes"].is_array()) throw ConfigError("scene.boxes: expected an array");
    for (const auto& b : j["boxes"]) {
      json::reject_unknown(b, "scene.boxes[]", {"min", "max"});
      SceneBox box;
      json::read_vec3(b, "min", box.min, "scene.boxes[]");
      json::read_vec3(b, "max", box.max, "scene.boxes[]");
      s.boxes.push_back(box);
    }
  }
  if (j.contains("texture")) {
    const auto& t = j["texture"];
    json::reject_unknown(t, "scene.texture", {"components", "min_wavelength", "max_wavelength", "contrast"});
    read(t, "components", s.texture_components, "scene.texture");
    read(t, "min_wavelength", s.min_wavelength, "scene.texture");
    read(t, "max_wavelength", s.max_wavelength, "scene.texture");
    read(t, "contrast", s.contrast, "scene.texture");
  }
  read(j, "gains", s.gains, "scene");
  read(j, "biases", s.biases, "scene");
  read(j, "image_noise", s.image_noise, "scene");
  if (j.contains("tracks")) {
    const auto& t = j["tracks"];
    json::reject_unknown(t, "scene.tracks", {"count", "noise_px", "margin_px"});
    read(t, "count", s.track_count, "scene.tracks");
    read(t, "noise_px", s.track_noise_px, "scene.tracks");
    read(t, "margin_px", s.track_margin_px, "scene.tracks");
  }
  read(j, "seed", s.seed, "scene");
  s.validate();
  return s;
}

struct SyntheticScene {
  Intrinsics camera;
  std::vector<Pose> poses;
  std::vector<Image> images;
  /// Camera-frame depth per pixel; 0 where no surface is hit.
  std::vector<Image> depths;
  /// Ground-truth landmark positions (world frame), indexed by track id.
  std::vector<Eigen::Vector3d> points;
  std::vector<Measurement> tracks;
};

namespace detail {

struct Texture {
  std::vector<Eigen::Vector3d> freq;
  std::vector<double> phase;
  double amplitude = 0.0;

  double operator()(const Eigen::Vector3d& p) const {
    double s = 0.0;
    for (std::size_t k = 0; k < freq.size(); ++k) s += std::sin(freq[k].dot(p) + phase[k]);
    return std::clamp(0.5 + amplitude * s, 0.0, 1.0);
  }
};

inline Texture make_texture(const SceneSpec& spec, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Texture t;
  const double lo = std::log(spec.min_wavelength), hi = std::log(spec.max_wavelength);
  for (int k = 0; k < spec.texture_components; ++k) {
    Eigen::Vector3d d(g(rng), g(rng), g(rng));
    d.normalize();
    const double wavelength = std::exp(lo + (hi - lo) * u(rng));
    t.freq.push_back(d * (2.0 * std::numbers::pi / wavelength));
    t.phase.push_back(2.0 * std::numbers::pi * u(rng));
  }
  t.amplitude = spec.contrast / std::sqrt(static_cast<double>(spec.texture_components));
  return t;
}

/// Ray parameter s > 0 of the nearest surface along origin + s * dir.
inline std::optional<double> cast_ray(const SceneSpec& spec, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : spec.planes) {
    const double denom = p.normal.dot(dir);
    if (std::abs(denom) < 1e-15) continue;
    const double s = (p.offset - p.normal.dot(origin)) / denom;
    if (s > 1e-9) best = std::min(best, s);
  }
  for (const auto& b : spec.boxes) {
    double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
    bool miss = false;
    for (int a = 0; a < 3; ++a) {
      if (std::abs(dir(a)) < 1e-15) {
        if (origin(a) < b.min(a) || origin(a) > b.max(a)) miss = true;
        continue;
      }
      double ta = (b.min(a) - origin(a)) / dir(a), tb = (b.max(a) - origin(a)) / dir(a);
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    if (!miss && t0 <= t1 && t0 > 1e-9) best = std::min(best, t0);
  }
  if (!std::isfinite(best)) return std::nullopt;
  return best;
}

inline Pose scene_pose(const SceneSpec& spec, int k) {
  const double yaw = k * spec.yaw_deg * std::numbers::pi / 180.0;
  const double pitch = k * spec.pitch_deg * std::numbers::pi / 180.0;
  const Eigen::Matrix3d r_wc = (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitY()) *
                                Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitX()))
                                   .toRotationMatrix();
  const Eigen::Vector3d c = spec.start + k * spec.step;
  const Eigen::Matrix3d r = r_wc.transpose();
  return {r, -(r * c)};
}

/// Camera-frame depth of the surface seen through pixel `px` of `pose`.
inline std::optional<double> depth_at(const SceneSpec& spec, const Pose& pose, const Eigen::Vector2d& px) {
  const Eigen::Vector3d dir_c((px.x() - spec.camera.cx) / spec.camera.fx, (px.y() - spec.camera.cy) / spec.camera.fy, 1.0);
  const Eigen::Vector3d dir_w = pose.rotation().transpose() * dir_c;
  const auto s = cast_ray(spec, pose.center(), dir_w);
  if (!s) return std::nullopt;
  return *s;  // dir_c has unit z, so the ray parameter is the depth
}

}  // namespace detail

inline SyntheticScene synth_scene(const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const detail::Texture texture = detail::make_texture(spec, rng);
  SyntheticScene out;
  out.camera = spec.camera;
  const Intrinsics& k = spec.camera;

  for (int f = 0; f < spec.frames; ++f) {
    const Pose pose = detail::scene_pose(spec, f);
    const double gain = f < static_cast<int>(spec.gains.size()) ? spec.gains[static_cast<std::size_t>(f)] : 1.0;
    const double bias = f < static_cast<int>(spec.biases.size()) ? spec.biases[static_cast<std::size_t>(f)] : 0.0;
    Image img(k.width, k.height), depth(k.width, k.height);
    std::vector<double> noise(img.size(), 0.0);
    if (spec.image_noise > 0) {
      std::normal_distribution<double> g(0.0, spec.image_noise);
      for (auto& v : noise) v = g(rng);
    }
    for (int y = 0; y < k.height; ++y)
      for (int x = 0; x < k.width; ++x) {
        const auto z = detail::depth_at(spec, pose, Eigen::Vector2d(x, y));
        const std::size_t i = static_cast<std::size_t>(y) * k.width + x;
        if (!z) {
          img.data[i] = bias + noise[i];
          continue;
        }
        const Eigen::Vector3d pw = pose.inverse() * backproject(Eigen::Vector2d(x, y), *z, k);
        depth.data[i] = *z;
        img.data[i] = gain * texture(pw) + bias + noise[i];
      }
    out.poses.push_back(pose);
    out.images.push_back(std::move(img));
    out.depths.push_back(std::move(depth));
  }

  // Tracks start at random pixels of frame 0 and are kept when visible
  // (unoccluded and inside the margin) in every frame.
  std::uniform_real_distribution<double> ux(spec.track_margin_px, k.width - 1 - spec.track_margin_px);
  std::uniform_real_distribution<double> uy(spec.track_margin_px, k.height - 1 - spec.track_margin_px);
  std::normal_distribution<double> px_noise(0.0, spec.track_noise_px);
  const int max_attempts = 50 * std::max(spec.track_count, 1);
  for (int attempt = 0; attempt < max_attempts && static_cast<int>(out.points.size()) < spec.track_count; ++attempt) {
    const Eigen::Vector2d px0(ux(rng), uy(rng));
    const auto z0 = detail::depth_at(spec, out.poses[0], px0);
    if (!z0) continue;
    const Eigen::Vector3d pw = out.poses[0].inverse() * backproject(px0, *z0, k);
    std::vector<Eigen::Vector2d> pixels;
    bool visible = true;
    for (int f = 0; f < spec.frames && visible; ++f) {
      const Eigen::Vector3d pc = out.poses[static_cast<std::size_t>(f)] * pw;
      if (!(pc.z() > kMinDepth)) {
        visible = false;
        break;
      }
      const Eigen::Vector2d px = project_camera(pc, k);
      visible = px.x() >= spec.track_margin_px && px.y() >= spec.track_margin_px &&
                px.x() <= k.width - 1 - spec.track_margin_px && px.y() <= k.height - 1 - spec.track_margin_px;
      if (!visible) break;
      const auto zf = detail::depth_at(spec, out.poses[static_cast<std::size_t>(f)], px);
      visible = zf && std::abs(*zf - pc.z()) <= 1e-6 * pc.z();
      pixels.push_back(px);
    }
    if (!visible) continue;
    const int id = static_cast<int>(out.points.size());
    out.points.push_back(pw);
    for (int f = 0; f < spec.frames; ++f) {
      Eigen::Vector2d px = pixels[static_cast<std::size_t>(f)];
      if (spec.track_noise_px > 0) {
        px += Eigen::Vector2d(px_noise(rng), px_noise(rng));
        px.x() = std::clamp(px.x(), 0.0, static_cast<double>(k.width - 1));
        px.y() = std::clamp(px.y(), 0.0, static_cast<double>(k.height - 1));
      }
      out.tracks.push_back({f, id, px, 1.0});
    }
  }
  return out;
}

}  // namespace dcov
