#include "depthdiff/scene.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "depthdiff/errors.hpp"
#include "depthdiff/rng.hpp"

namespace depthdiff {

CameraIntrinsics CameraIntrinsics::from_fov(int width, int height, double hfov_deg) {
  CameraIntrinsics cam;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = width / (2.0 * std::tan(hfov_deg * std::numbers::pi / 360.0));
  cam.cx = width / 2.0;
  cam.cy = height / 2.0;
  cam.validate();
  return cam;
}

void CameraIntrinsics::validate() const {
  if (width <= 0 || height <= 0) throw ConfigError("camera: image extents must be positive");
  if (!(fx > 0) || !(fy > 0)) throw ConfigError("camera: focal lengths must be positive");
  if (!(cx >= 0 && cx < width && cy >= 0 && cy < height)) throw ConfigError("camera: principal point outside image");
}

Eigen::Vector3d CameraIntrinsics::ray(int row, int col) const {
  return {(col + 0.5 - cx) / fx, (row + 0.5 - cy) / fy, 1.0};
}

std::string to_string(Regime r) { return r == Regime::indoor ? "indoor" : "outdoor"; }

Regime regime_from_string(const std::string& s) {
  if (s == "indoor") return Regime::indoor;
  if (s == "outdoor") return Regime::outdoor;
  throw ConfigError("unknown regime '" + s + "' (expected indoor or outdoor)");
}

namespace {

Eigen::Vector3d jitter_color(Rng& rng, const Eigen::Vector3d& base, double spread) {
  Eigen::Vector3d c;
  for (int i = 0; i < 3; ++i) c[i] = std::clamp(base[i] + rng.uniform(-spread, spread), 0.02, 1.0);
  return c;
}

Eigen::Vector3d random_color(Rng& rng) {
  return {rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0)};
}

Primitive plane(const Eigen::Vector3d& n, double offset, const Eigen::Vector3d& albedo) {
  return {PlaneSurface{n, offset}, albedo};
}

void add_indoor(SceneSpec& s, Rng& rng) {
  const double cam_h = rng.uniform(1.3, 1.7);
  const double ceiling = rng.uniform(2.5, 3.2);
  const double back = rng.uniform(4.0, 10.0);
  const double room_w = rng.uniform(3.5, 6.0);
  const double shift = rng.uniform(-0.5, 0.5);
  const double left = -room_w / 2 + shift;
  const double right = room_w / 2 + shift;

  const Eigen::Vector3d wall = jitter_color(rng, {0.85, 0.78, 0.65}, 0.12);
  s.primitives.push_back(plane({0, 1, 0}, cam_h, jitter_color(rng, {0.45, 0.3, 0.2}, 0.1)));             // floor
  s.primitives.push_back(plane({0, 1, 0}, cam_h - ceiling, jitter_color(rng, {0.92, 0.92, 0.9}, 0.06)));  // ceiling
  s.primitives.push_back(plane({0, 0, 1}, back, wall));                                                    // back wall
  s.primitives.push_back(plane({1, 0, 0}, left, jitter_color(rng, wall, 0.05)));
  s.primitives.push_back(plane({1, 0, 0}, right, jitter_color(rng, wall, 0.05)));

  const int objects = 1 + static_cast<int>(rng.uniform_int(3));
  for (int i = 0; i < objects; ++i) {
    const double z_far = back - 0.8;
    if (rng.coin()) {
      const double r = rng.uniform(0.2, 0.6);
      const double z = rng.uniform(1.5, z_far);
      const double x = rng.uniform(left + r, right - r);
      s.primitives.push_back({Sphere{{x, cam_h - r, z}, r}, random_color(rng)});
    } else {
      const Eigen::Vector3d he(rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.6));
      const double reach = he.head<2>().norm() + he.z();
      const double z = rng.uniform(1.5 + reach * 0.5, z_far);
      const double x = rng.uniform(left + reach * 0.7, right - reach * 0.7);
      s.primitives.push_back({Box{{x, cam_h - he.y(), std::min(z, back - reach)}, he, rng.uniform(0.0, std::numbers::pi)},
                              random_color(rng)});
    }
  }
}

void add_outdoor(SceneSpec& s, Rng& rng) {
  const double cam_h = rng.uniform(1.4, 1.9);
  const double backdrop = rng.uniform(50.0, 80.0);
  s.primitives.push_back(plane({0, 1, 0}, cam_h, jitter_color(rng, rng.coin() ? Eigen::Vector3d(0.3, 0.55, 0.25)
                                                                                   : Eigen::Vector3d(0.5, 0.5, 0.48),
                                                              0.08)));
  s.primitives.push_back(plane({0, 0, 1}, backdrop, jitter_color(rng, {0.55, 0.72, 0.95}, 0.06)));

  const int objects = 1 + static_cast<int>(rng.uniform_int(6));
  for (int i = 0; i < objects; ++i) {
    const double z = rng.uniform(5.0, 45.0);
    const double lateral = z * 0.5;
    if (rng.coin()) {
      const double r = rng.uniform(0.8, 3.0);
      s.primitives.push_back({Sphere{{rng.uniform(-lateral, lateral), cam_h - r, z}, r}, random_color(rng)});
    } else {
      const Eigen::Vector3d he(rng.uniform(1.0, 6.0), rng.uniform(1.5, 8.0), rng.uniform(1.0, 4.0));
      const double zc = std::max(z, 2.0 + Eigen::Vector2d(he.x(), he.z()).norm());
      s.primitives.push_back({Box{{rng.uniform(-lateral, lateral), cam_h - he.y(), zc}, he, rng.uniform(0.0, std::numbers::pi)},
                              random_color(rng)});
    }
  }
}

}  // namespace

SceneSpec sample_scene(std::uint64_t seed, Regime regime, const CameraIntrinsics& camera, bool inject_holes) {
  camera.validate();
  SceneSpec s;
  s.seed = seed;
  s.regime = regime;
  s.inject_holes = inject_holes;
  Rng rng = Rng(seed).stream(regime == Regime::indoor ? "scene/indoor" : "scene/outdoor");
  if (regime == Regime::indoor) {
    add_indoor(s, rng);
  } else {
    add_outdoor(s, rng);
  }
  const Eigen::Vector3d light(rng.uniform(-0.6, 0.6), -1.0, rng.uniform(-0.8, -0.1));
  s.light_direction = light.normalized();
  return s;
}

double intersect(const Primitive& prim, const Eigen::Vector3d& ray, Eigen::Vector3d* normal) {
  constexpr double kMiss = -1.0;
  if (const auto* sp = std::get_if<Sphere>(&prim.shape)) {
    const double a = ray.squaredNorm();
    const double b = ray.dot(sp->center);
    const double c = sp->center.squaredNorm() - sp->radius * sp->radius;
    const double disc = b * b - a * c;
    if (disc < 0) return kMiss;
    const double sq = std::sqrt(disc);
    double t = (b - sq) / a;
    if (t <= 0) t = (b + sq) / a;
    if (t <= 0) return kMiss;
    if (normal) *normal = (t * ray - sp->center) / sp->radius;
    return t;
  }
  if (const auto* pl = std::get_if<PlaneSurface>(&prim.shape)) {
    const double denom = pl->normal.dot(ray);
    if (std::abs(denom) < 1e-12) return kMiss;
    const double t = pl->offset / denom;
    if (t <= 0) return kMiss;
    if (normal) *normal = pl->normal;
    return t;
  }
  const auto& bx = std::get<Box>(prim.shape);
  // Rotate into the box frame; rotation about y by -yaw.
  const double cy = std::cos(bx.yaw), sy = std::sin(bx.yaw);
  const auto to_local = [&](const Eigen::Vector3d& v) {
    return Eigen::Vector3d(cy * v.x() - sy * v.z(), v.y(), sy * v.x() + cy * v.z());
  };
  const Eigen::Vector3d o = to_local(-bx.center);
  const Eigen::Vector3d d = to_local(ray);
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int axis_near = -1;
  double sign_near = 0;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d[k]) < 1e-15) {
      if (std::abs(o[k]) > bx.half_extents[k]) return kMiss;
      continue;
    }
    double t0 = (-bx.half_extents[k] - o[k]) / d[k];
    double t1 = (bx.half_extents[k] - o[k]) / d[k];
    double s = -1.0;
    if (t0 > t1) {
      std::swap(t0, t1);
      s = 1.0;
    }
    if (t0 > t_near) {
      t_near = t0;
      axis_near = k;
      sign_near = s;
    }
    t_far = std::min(t_far, t1);
  }
  if (t_near > t_far || t_far <= 0 || t_near <= 0) return kMiss;
  if (normal) {
    Eigen::Vector3d nl = Eigen::Vector3d::Zero();
    nl[axis_near] = sign_near;
    // back to camera frame: rotation about y by +yaw
    *normal = Eigen::Vector3d(cy * nl.x() + sy * nl.z(), nl.y(), -sy * nl.x() + cy * nl.z());
  }
  return t_near;
}

RenderResult render(const SceneSpec& spec, const CameraIntrinsics& camera) {
  camera.validate();
  const int h = camera.height, w = camera.width;
  RenderResult out;
  out.rgb = RgbImage::zeros(h, w);
  out.depth = DepthMap::dense(Plane::Zero(h, w));
  out.primitive_id.setConstant(h, w, -1);

  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const Eigen::Vector3d ray = camera.ray(r, c);
      double best = std::numeric_limits<double>::infinity();
      int best_id = -1;
      Eigen::Vector3d best_n = Eigen::Vector3d::Zero();
      for (std::size_t i = 0; i < spec.primitives.size(); ++i) {
        Eigen::Vector3d n;
        const double t = intersect(spec.primitives[i], ray, &n);
        if (t > 0 && t < best) {
          best = t;
          best_id = static_cast<int>(i);
          best_n = n;
        }
      }
      if (best_id < 0) {
        out.depth.valid(r, c) = false;
        continue;
      }
      if (best_n.dot(ray) > 0) best_n = -best_n;
      const double lambert = std::max(0.0, best_n.dot(spec.light_direction));
      const Eigen::Vector3d& albedo = spec.primitives[static_cast<std::size_t>(best_id)].albedo;
      for (int k = 0; k < 3; ++k) out.rgb.channels[k](r, c) = albedo[k] * (kAmbient + (1.0 - kAmbient) * lambert);
      out.depth.values(r, c) = best * ray.z();
      out.primitive_id(r, c) = best_id;
    }
  }

  if (spec.inject_holes) {
    Rng rng = Rng(spec.seed).stream("scene/holes");
    const int holes = 1 + static_cast<int>(rng.uniform_int(3));
    for (int i = 0; i < holes; ++i) {
      const int hh = 2 + static_cast<int>(rng.uniform_int(5));
      const int hw = 2 + static_cast<int>(rng.uniform_int(5));
      const int r0 = static_cast<int>(rng.uniform_int(std::max(1, h - hh)));
      const int c0 = static_cast<int>(rng.uniform_int(std::max(1, w - hw)));
      out.depth.valid.block(r0, c0, std::min(hh, h - r0), std::min(hw, w - c0)).setConstant(false);
    }
    out.depth.values = out.depth.valid.select(out.depth.values, 0.0);
  }
  return out;
}

void augment_hflip(RgbImage& rgb, DepthMap& depth, bool coin) {
  if (!coin) return;
  for (auto& c : rgb.channels) c = hflip(c).eval();
  depth.values = hflip(depth.values).eval();
  depth.valid = hflip(depth.valid).eval();
}

}  // namespace depthdiff
