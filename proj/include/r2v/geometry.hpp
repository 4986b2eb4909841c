#pragma once

// 3D scene building blocks: vectors, rigid transforms, meshes, cameras, and
// the built-in primitives used by scene files and tests.

#include "r2v/common.hpp"

#include <array>
#include <cmath>

namespace r2v {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        double n = norm();
        R2V_CHECK(n > 1e-12, "normalize: zero-length vector");
        return {x / n, y / n, z / n};
    }
};

struct Mat3 {
    // row-major
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return Mat3{}; }

    double operator()(int r, int c) const { return m[static_cast<size_t>(r * 3 + c)]; }
    double& operator()(int r, int c) { return m[static_cast<size_t>(r * 3 + c)]; }

    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }

    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; i++) {
            for (int j = 0; j < 3; j++) {
                double s = 0.0;
                for (int k = 0; k < 3; k++) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        }
        return r;
    }

    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; i++) {
            for (int j = 0; j < 3; j++) r(i, j) = (*this)(j, i);
        }
        return r;
    }

    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }

    static Mat3 axis_angle(const Vec3& axis_in, double angle) {
        Vec3 a = axis_in.normalized();
        double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
        Mat3 r;
        r(0, 0) = t * a.x * a.x + c;
        r(0, 1) = t * a.x * a.y - s * a.z;
        r(0, 2) = t * a.x * a.z + s * a.y;
        r(1, 0) = t * a.x * a.y + s * a.z;
        r(1, 1) = t * a.y * a.y + c;
        r(1, 2) = t * a.y * a.z - s * a.x;
        r(2, 0) = t * a.x * a.z - s * a.y;
        r(2, 1) = t * a.y * a.z + s * a.x;
        r(2, 2) = t * a.z * a.z + c;
        return r;
    }

    bool is_rotation(double tol = 1e-6) const {
        Mat3 rtr = transposed() * (*this);
        for (int i = 0; i < 3; i++) {
            for (int j = 0; j < 3; j++) {
                double expect = (i == j) ? 1.0 : 0.0;
                if (std::abs(rtr(i, j) - expect) > tol) return false;
            }
        }
        return std::abs(det() - 1.0) <= tol;
    }
};

struct Quat {
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

    static Quat from_axis_angle(const Vec3& axis, double angle) {
        if (axis.norm() < 1e-12 || angle == 0.0) return Quat{};
        Vec3 a = axis.normalized();
        double h = 0.5 * angle;
        double s = std::sin(h);
        return {std::cos(h), a.x * s, a.y * s, a.z * s};
    }

    Quat normalized() const {
        double n = std::sqrt(w * w + x * x + y * y + z * z);
        return {w / n, x / n, y / n, z / n};
    }

    Mat3 to_mat3() const {
        Quat q = normalized();
        Mat3 r;
        r(0, 0) = 1 - 2 * (q.y * q.y + q.z * q.z);
        r(0, 1) = 2 * (q.x * q.y - q.z * q.w);
        r(0, 2) = 2 * (q.x * q.z + q.y * q.w);
        r(1, 0) = 2 * (q.x * q.y + q.z * q.w);
        r(1, 1) = 1 - 2 * (q.x * q.x + q.z * q.z);
        r(1, 2) = 2 * (q.y * q.z - q.x * q.w);
        r(2, 0) = 2 * (q.x * q.z - q.y * q.w);
        r(2, 1) = 2 * (q.y * q.z + q.x * q.w);
        r(2, 2) = 1 - 2 * (q.x * q.x + q.y * q.y);
        return r;
    }

    static Quat slerp(const Quat& a, Quat b, double t) {
        double d = a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
        if (d < 0.0) {
            b = {-b.w, -b.x, -b.y, -b.z};
            d = -d;
        }
        if (d > 0.9995) {
            Quat q{a.w + t * (b.w - a.w), a.x + t * (b.x - a.x), a.y + t * (b.y - a.y),
                   a.z + t * (b.z - a.z)};
            return q.normalized();
        }
        double th = std::acos(std::min(1.0, d));
        double s = std::sin(th);
        double wa = std::sin((1.0 - t) * th) / s;
        double wb = std::sin(t * th) / s;
        return Quat{wa * a.w + wb * b.w, wa * a.x + wb * b.x, wa * a.y + wb * b.y,
                    wa * a.z + wb * b.z};
    }
};

// rotation + translation + uniform scale; applied as p' = R*(s*p) + t
struct RigidTransform {
    Mat3 rotation;
    Vec3 translation;
    double uniform_scale = 1.0;

    Vec3 apply(const Vec3& p) const { return rotation * (p * uniform_scale) + translation; }

    RigidTransform composed(const RigidTransform& inner) const {
        // (*this) ∘ inner
        RigidTransform r;
        r.rotation = rotation * inner.rotation;
        r.uniform_scale = uniform_scale * inner.uniform_scale;
        r.translation = apply(inner.translation);
        // apply() already scaled+rotated inner.translation and added our translation
        return r;
    }

    void validate() const {
        R2V_CHECK(rotation.is_rotation(1e-6), "rigid transform: rotation not orthonormal");
        R2V_CHECK(uniform_scale > 0.0, "rigid transform: scale must be positive");
    }
};

struct Color3 {
    double r = 0.0, g = 0.0, b = 0.0;
};

struct Mesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> faces;
    std::vector<Color3> vertex_colors;

    void validate() const {
        R2V_CHECK(vertex_colors.size() == vertices.size(), "mesh: color count != vertex count");
        int nv = static_cast<int>(vertices.size());
        for (const auto& f : faces) {
            for (int i : f) {
                R2V_CHECK(i >= 0 && i < nv, "mesh: face index out of range");
            }
            R2V_CHECK(f[0] != f[1] && f[1] != f[2] && f[0] != f[2], "mesh: degenerate face");
        }
        for (const auto& c : vertex_colors) {
            R2V_CHECK(c.r >= 0 && c.r <= 1 && c.g >= 0 && c.g <= 1 && c.b >= 0 && c.b <= 1,
                      "mesh: vertex color outside [0,1]");
        }
    }

    Vec3 centroid() const {
        Vec3 c;
        for (const auto& v : vertices) c = c + v;
        if (!vertices.empty()) c = c * (1.0 / static_cast<double>(vertices.size()));
        return c;
    }
};

// World-to-camera pose. Camera space: x right, y up, z forward into the scene;
// depth is camera-space z, strictly positive for visible geometry.
struct Camera {
    RigidTransform pose;  // world -> camera (uniform_scale must be 1)
    double vertical_fov = 1.0471975511965976;  // 60 deg
    double aspect = 1.0;
    double near = 0.05;
    double far = 100.0;

    void validate() const {
        if (!(vertical_fov > 0.0 && vertical_fov < 3.14159265358979323846)) {
            throw ConfigError("camera: vertical_fov must lie in (0, pi)");
        }
        if (!(aspect > 0.0)) throw ConfigError("camera: aspect must be positive");
        if (!(near > 0.0 && near < far)) throw ConfigError("camera: need 0 < near < far");
        R2V_CHECK(pose.rotation.is_rotation(1e-6), "camera: rotation not orthonormal");
        R2V_CHECK(pose.uniform_scale == 1.0, "camera: pose must not scale");
    }

    Vec3 to_camera(const Vec3& p_world) const { return pose.apply(p_world); }

    // camera center in world coordinates: solves R*c + t = 0
    Vec3 center_world() const {
        Vec3 t = pose.translation;
        return pose.rotation.transposed() * (-t);
    }

    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up_hint,
                          double vertical_fov, double aspect, double near, double far) {
        Vec3 fwd = (target - eye).normalized();
        Vec3 right = up_hint.cross(fwd).normalized();
        Vec3 up = fwd.cross(right);
        Camera c;
        // rows of R are camera axes expressed in world coordinates
        c.pose.rotation(0, 0) = right.x;
        c.pose.rotation(0, 1) = right.y;
        c.pose.rotation(0, 2) = right.z;
        c.pose.rotation(1, 0) = up.x;
        c.pose.rotation(1, 1) = up.y;
        c.pose.rotation(1, 2) = up.z;
        c.pose.rotation(2, 0) = fwd.x;
        c.pose.rotation(2, 1) = fwd.y;
        c.pose.rotation(2, 2) = fwd.z;
        c.pose.translation = -(c.pose.rotation * eye);
        c.vertical_fov = vertical_fov;
        c.aspect = aspect;
        c.near = near;
        c.far = far;
        c.validate();
        return c;
    }
};

// ---- built-in primitives ----

// Axis-aligned quad in the XY plane, centered at origin, facing +z and -z
// (rendering is two-sided). Two triangles.
inline Mesh make_quad(double width, double height, Color3 color) {
    Mesh m;
    double hw = width / 2, hh = height / 2;
    m.vertices = {{-hw, -hh, 0}, {hw, -hh, 0}, {hw, hh, 0}, {-hw, hh, 0}};
    m.faces = {{0, 1, 2}, {0, 2, 3}};
    m.vertex_colors.assign(4, color);
    return m;
}

// Box centered at origin. front_color applies to the -z face vertices and
// back_color to the +z face vertices, so opposite sides are distinguishable.
inline Mesh make_box(double sx, double sy, double sz, Color3 front_color, Color3 back_color) {
    Mesh m;
    double hx = sx / 2, hy = sy / 2, hz = sz / 2;
    m.vertices = {
        {-hx, -hy, -hz}, {hx, -hy, -hz}, {hx, hy, -hz}, {-hx, hy, -hz},  // -z (front)
        {-hx, -hy, hz},  {hx, -hy, hz},  {hx, hy, hz},  {-hx, hy, hz},   // +z (back)
    };
    for (int i = 0; i < 4; i++) m.vertex_colors.push_back(front_color);
    for (int i = 0; i < 4; i++) m.vertex_colors.push_back(back_color);
    m.faces = {
        {0, 1, 2}, {0, 2, 3},  // -z
        {5, 4, 7}, {5, 7, 6},  // +z
        {4, 0, 3}, {4, 3, 7},  // -x
        {1, 5, 6}, {1, 6, 2},  // +x
        {3, 2, 6}, {3, 6, 7},  // +y
        {4, 5, 1}, {4, 1, 0},  // -y
    };
    return m;
}

// Checkerboard plane in the XZ plane (y = 0), size_x by size_z, `cells`
// squares per side, alternating between two colors.
inline Mesh make_checker_plane(double size_x, double size_z, int cells, Color3 ca, Color3 cb) {
    R2V_CHECK(cells >= 1, "checker plane: cells must be >= 1");
    Mesh m;
    double x0 = -size_x / 2, z0 = -size_z / 2;
    double dx = size_x / cells, dz = size_z / cells;
    for (int i = 0; i < cells; i++) {
        for (int j = 0; j < cells; j++) {
            Color3 c = ((i + j) % 2 == 0) ? ca : cb;
            int base = static_cast<int>(m.vertices.size());
            double x = x0 + i * dx, z = z0 + j * dz;
            m.vertices.push_back({x, 0, z});
            m.vertices.push_back({x + dx, 0, z});
            m.vertices.push_back({x + dx, 0, z + dz});
            m.vertices.push_back({x, 0, z + dz});
            for (int k = 0; k < 4; k++) m.vertex_colors.push_back(c);
            m.faces.push_back({base, base + 1, base + 2});
            m.faces.push_back({base, base + 2, base + 3});
        }
    }
    return m;
}

}  // namespace r2v
