#pragma once

// Software z-buffer rasterizer producing per-frame guidance packs: flat-shaded
// vertex-color RGB, camera-space depth, and coverage / foreground masks.
// No lighting, no backface culling (meshes render two-sided).

#include "r2v/geometry.hpp"
#include "r2v/tensor.hpp"

#include <limits>

namespace r2v {

// Per-frame 3D control signal. depth is camera-space z with 0 reserved for
// "no geometry"; fg_mask marks pixels whose winning fragment is foreground.
struct GuidancePack {
    Tensor rgb;     // (H, W, 3) in [0,1]
    Tensor depth;   // (H, W), 0 where uncovered
    Mask coverage_mask;
    Mask fg_mask;

    int64_t height() const { return depth.shape[0]; }
    int64_t width() const { return depth.shape[1]; }

    void validate() const {
        R2V_CHECK(rgb.ndim() == 3 && rgb.shape[2] == 3, "pack: rgb must be HxWx3");
        R2V_CHECK(depth.ndim() == 2, "pack: depth must be HxW");
        R2V_CHECK(coverage_mask.h == depth.shape[0] && coverage_mask.w == depth.shape[1],
                  "pack: mask size mismatch");
        for (int64_t i = 0; i < depth.numel(); i++) {
            bool cov = coverage_mask.v[static_cast<size_t>(i)] != 0;
            R2V_CHECK((depth[i] > 0.0) == cov, "pack: depth>0 must match coverage");
        }
        R2V_CHECK(fg_mask.subset_of(coverage_mask), "pack: fg_mask must be subset of coverage");
    }
};

struct MeshInstance {
    const Mesh* mesh = nullptr;
    RigidTransform transform;
    bool foreground = false;
};

// Pixels with no reconstructed geometry behind them; feature injection is
// suppressed there.
inline Mask invisible_region_mask(const GuidancePack& pack) {
    return ~pack.coverage_mask;
}

namespace raster_detail {

struct ClipVertex {
    Vec3 p;  // camera space
    Color3 c;
    bool fg;
};

inline ClipVertex lerp(const ClipVertex& a, const ClipVertex& b, double t) {
    ClipVertex r;
    r.p = a.p + (b.p - a.p) * t;
    r.c = {a.c.r + (b.c.r - a.c.r) * t, a.c.g + (b.c.g - a.c.g) * t, a.c.b + (b.c.b - a.c.b) * t};
    r.fg = a.fg;
    return r;
}

// Sutherland-Hodgman clip of a triangle against z >= near. Result has 0, 3 or
// 4 vertices.
inline int clip_near(const ClipVertex in[3], double near, ClipVertex out[4]) {
    int n = 0;
    for (int i = 0; i < 3; i++) {
        const ClipVertex& cur = in[i];
        const ClipVertex& nxt = in[(i + 1) % 3];
        bool cur_in = cur.p.z >= near;
        bool nxt_in = nxt.p.z >= near;
        if (cur_in) out[n++] = cur;
        if (cur_in != nxt_in) {
            double t = (near - cur.p.z) / (nxt.p.z - cur.p.z);
            out[n++] = lerp(cur, nxt, t);
        }
    }
    return n;
}

inline double edge_fn(double ax, double ay, double bx, double by, double px, double py) {
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

// Fill-rule: a boundary pixel center belongs to the triangle iff it lies on a
// top edge (horizontal, pointing +x after CCW normalization) or a left edge
// (pointing -y). Shared edges between triangles then cover each pixel once.
inline bool top_left(double ax, double ay, double bx, double by) {
    double dx = bx - ax, dy = by - ay;
    if (dy == 0.0) return dx > 0.0;
    return dy < 0.0;
}

}  // namespace raster_detail

inline GuidancePack rasterize(const std::vector<MeshInstance>& instances, const Camera& camera,
                              int width, int height) {
    R2V_CONFIG_CHECK(width > 0 && height > 0, "rasterize: resolution must be positive");
    camera.validate();
    for (const auto& inst : instances) {
        R2V_CHECK(inst.mesh != nullptr, "rasterize: null mesh");
        inst.mesh->validate();
        inst.transform.validate();
    }

    using raster_detail::ClipVertex;
    using raster_detail::edge_fn;

    GuidancePack pack;
    pack.rgb = Tensor::zeros({height, width, 3});
    pack.depth = Tensor::zeros({height, width});
    pack.coverage_mask = Mask(height, width);
    pack.fg_mask = Mask(height, width);

    const double tan_half_y = std::tan(camera.vertical_fov / 2.0);
    const double tan_half_x = tan_half_y * camera.aspect;
    const double fx = (width / 2.0) / tan_half_x;
    const double fy = (height / 2.0) / tan_half_y;
    const double cx = width / 2.0;
    const double cy = height / 2.0;

    std::vector<double> zbuf(static_cast<size_t>(width * height),
                             std::numeric_limits<double>::infinity());

    auto raster_triangle = [&](const ClipVertex v[3]) {
        // project to pixel coordinates (origin top-left, y down)
        double sx[3], sy[3], invz[3];
        for (int i = 0; i < 3; i++) {
            invz[i] = 1.0 / v[i].p.z;
            sx[i] = cx + fx * v[i].p.x * invz[i];
            sy[i] = cy - fy * v[i].p.y * invz[i];
        }
        int i0 = 0, i1 = 1, i2 = 2;
        double area2 = edge_fn(sx[i0], sy[i0], sx[i1], sy[i1], sx[i2], sy[i2]);
        if (area2 < 0.0) {
            std::swap(i1, i2);
            area2 = -area2;
        }
        if (area2 <= 1e-14) return;  // degenerate after projection

        double min_x = std::min({sx[0], sx[1], sx[2]});
        double max_x = std::max({sx[0], sx[1], sx[2]});
        double min_y = std::min({sy[0], sy[1], sy[2]});
        double max_y = std::max({sy[0], sy[1], sy[2]});
        int px0 = std::max(0, static_cast<int>(std::floor(min_x - 0.5)));
        int px1 = std::min(width - 1, static_cast<int>(std::ceil(max_x - 0.5)));
        int py0 = std::max(0, static_cast<int>(std::floor(min_y - 0.5)));
        int py1 = std::min(height - 1, static_cast<int>(std::ceil(max_y - 0.5)));

        bool tl01 = raster_detail::top_left(sx[i0], sy[i0], sx[i1], sy[i1]);
        bool tl12 = raster_detail::top_left(sx[i1], sy[i1], sx[i2], sy[i2]);
        bool tl20 = raster_detail::top_left(sx[i2], sy[i2], sx[i0], sy[i0]);

        for (int py = py0; py <= py1; py++) {
            double pyc = py + 0.5;
            for (int px = px0; px <= px1; px++) {
                double pxc = px + 0.5;
                double e01 = edge_fn(sx[i0], sy[i0], sx[i1], sy[i1], pxc, pyc);
                double e12 = edge_fn(sx[i1], sy[i1], sx[i2], sy[i2], pxc, pyc);
                double e20 = edge_fn(sx[i2], sy[i2], sx[i0], sy[i0], pxc, pyc);
                bool in01 = e01 > 0.0 || (e01 == 0.0 && tl01);
                bool in12 = e12 > 0.0 || (e12 == 0.0 && tl12);
                bool in20 = e20 > 0.0 || (e20 == 0.0 && tl20);
                if (!(in01 && in12 && in20)) continue;

                double l0 = e12 / area2;
                double l1 = e20 / area2;
                double l2 = e01 / area2;
                // z-buffer uses screen-linear 1/z (perspective-correct depth)
                double iz = l0 * invz[i0] + l1 * invz[i1] + l2 * invz[i2];
                double z = 1.0 / iz;
                if (z > camera.far) continue;
                size_t pix = static_cast<size_t>(py * width + px);
                if (z >= zbuf[pix]) continue;
                zbuf[pix] = z;
                pack.depth[static_cast<int64_t>(pix)] = z;
                // vertex colors interpolate with screen-space barycentrics
                double r = l0 * v[i0].c.r + l1 * v[i1].c.r + l2 * v[i2].c.r;
                double g = l0 * v[i0].c.g + l1 * v[i1].c.g + l2 * v[i2].c.g;
                double b = l0 * v[i0].c.b + l1 * v[i1].c.b + l2 * v[i2].c.b;
                pack.rgb.at3(py, px, 0) = r;
                pack.rgb.at3(py, px, 1) = g;
                pack.rgb.at3(py, px, 2) = b;
                pack.coverage_mask.at(py, px) = 1;
                pack.fg_mask.at(py, px) = v[i0].fg ? 1 : 0;
            }
        }
    };

    for (const auto& inst : instances) {
        const Mesh& mesh = *inst.mesh;
        // transform all vertices to camera space once
        std::vector<Vec3> cam_pts(mesh.vertices.size());
        for (size_t i = 0; i < mesh.vertices.size(); i++) {
            cam_pts[i] = camera.to_camera(inst.transform.apply(mesh.vertices[i]));
        }
        for (const auto& f : mesh.faces) {
            ClipVertex tri[3];
            for (int i = 0; i < 3; i++) {
                tri[i].p = cam_pts[static_cast<size_t>(f[static_cast<size_t>(i)])];
                tri[i].c = mesh.vertex_colors[static_cast<size_t>(f[static_cast<size_t>(i)])];
                tri[i].fg = inst.foreground;
            }
            ClipVertex clipped[4];
            int n = raster_detail::clip_near(tri, camera.near, clipped);
            if (n < 3) continue;
            ClipVertex t0[3] = {clipped[0], clipped[1], clipped[2]};
            raster_triangle(t0);
            if (n == 4) {
                ClipVertex t1[3] = {clipped[0], clipped[2], clipped[3]};
                raster_triangle(t1);
            }
        }
    }

    return pack;
}

}  // namespace r2v
