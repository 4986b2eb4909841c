#pragma once

// Scene composition: camera trajectories, per-frame animation, novel-view
// rendering of the foreground, and the scene description file parser.

#include "r2v/rasterizer.hpp"

#include <fstream>
#include <map>
#include <optional>
#include <sstream>

namespace r2v {

enum class TrajectoryKind { Static, Orbit, Pan, Zoom, Dolly };

inline TrajectoryKind trajectory_kind_from_string(const std::string& s) {
    if (s == "static") return TrajectoryKind::Static;
    if (s == "orbit") return TrajectoryKind::Orbit;
    if (s == "pan") return TrajectoryKind::Pan;
    if (s == "zoom") return TrajectoryKind::Zoom;
    if (s == "dolly") return TrajectoryKind::Dolly;
    throw ConfigError("unknown camera trajectory kind '" + s + "'");
}

struct TrajectoryParams {
    double orbit_angle = 0.0;  // total radians over the clip
    Vec3 orbit_center{0, 0, 0};
    Vec3 orbit_axis{0, 1, 0};
    double pan_x = 0.0;  // camera-frame right offset at the final frame
    double pan_y = 0.0;  // camera-frame up offset at the final frame
    double zoom_delta_fov = 0.0;  // additive fov change at the final frame
    double dolly_distance = 0.0;  // camera-frame forward motion at the final frame
};

// Frame 0 always equals the base camera. Orbit advances by angle*f/n so that a
// full 2*pi orbit is loopable (frame n would coincide with frame 0); the other
// kinds reach their target parameter exactly at the final frame (f/(n-1)).
inline std::vector<Camera> make_camera_trajectory(const Camera& base, TrajectoryKind kind,
                                                  const TrajectoryParams& params, int n_frames) {
    R2V_CHECK(n_frames >= 1, "trajectory: n_frames must be >= 1");
    base.validate();
    std::vector<Camera> track;
    track.reserve(static_cast<size_t>(n_frames));
    for (int f = 0; f < n_frames; f++) {
        Camera cam = base;
        double endpoint_frac = (n_frames > 1) ? static_cast<double>(f) / (n_frames - 1) : 0.0;
        switch (kind) {
            case TrajectoryKind::Static:
                break;
            case TrajectoryKind::Orbit: {
                double theta = params.orbit_angle * static_cast<double>(f) / n_frames;
                RigidTransform rot;
                rot.rotation = Mat3::axis_angle(params.orbit_axis, theta);
                rot.translation = params.orbit_center - rot.rotation * params.orbit_center;
                cam.pose = base.pose.composed(rot);
                break;
            }
            case TrajectoryKind::Pan:
                cam.pose.translation.x -= params.pan_x * endpoint_frac;
                cam.pose.translation.y -= params.pan_y * endpoint_frac;
                break;
            case TrajectoryKind::Zoom: {
                double fov = base.vertical_fov + params.zoom_delta_fov * endpoint_frac;
                if (!(fov > 0.0 && fov < 3.14159265358979323846)) {
                    throw ConfigError("zoom trajectory leaves fov outside (0, pi)");
                }
                cam.vertical_fov = fov;
                break;
            }
            case TrajectoryKind::Dolly:
                cam.pose.translation.z -= params.dolly_distance * endpoint_frac;
                break;
        }
        track.push_back(cam);
    }
    return track;
}

struct SceneAnimation {
    Mesh foreground;
    std::vector<RigidTransform> fg_transforms;  // one per frame
    std::optional<Mesh> background;             // static
    std::vector<Camera> camera_track;
    int n_frames = 0;

    void validate() const {
        R2V_CHECK(n_frames >= 1, "scene: n_frames must be >= 1");
        R2V_CHECK(static_cast<int>(fg_transforms.size()) == n_frames,
                  "scene: fg transform count != n_frames");
        R2V_CHECK(static_cast<int>(camera_track.size()) == n_frames,
                  "scene: camera count != n_frames");
        foreground.validate();
        if (background) background->validate();
        for (const auto& t : fg_transforms) t.validate();
    }
};

inline GuidancePack render_frame(const SceneAnimation& scene, int frame, int width, int height) {
    std::vector<MeshInstance> instances;
    if (scene.background) {
        instances.push_back({&*scene.background, RigidTransform{}, false});
    }
    instances.push_back({&scene.foreground, scene.fg_transforms[static_cast<size_t>(frame)], true});
    return rasterize(instances, scene.camera_track[static_cast<size_t>(frame)], width, height);
}

inline std::vector<GuidancePack> render_animation(const SceneAnimation& scene, int width, int height) {
    scene.validate();
    std::vector<GuidancePack> packs;
    packs.reserve(static_cast<size_t>(scene.n_frames));
    for (int f = 0; f < scene.n_frames; f++) {
        packs.push_back(render_frame(scene, f, width, height));
    }
    return packs;
}

// Renders the foreground alone from azimuths uniformly spaced on a horizontal
// orbit around its centroid. View 0 looks along +z from the -z side; view at
// pi sees the object from behind. Returns (rgb, coverage) pairs.
inline std::vector<std::pair<Tensor, Mask>> foreground_novel_views(const Mesh& fg, int n_views,
                                                                   double radius, int width,
                                                                   int height,
                                                                   double vertical_fov = 1.0471975511965976) {
    R2V_CHECK(n_views >= 1, "novel views: n_views must be >= 1");
    fg.validate();
    Vec3 center = fg.centroid();
    std::vector<std::pair<Tensor, Mask>> views;
    for (int k = 0; k < n_views; k++) {
        double az = 2.0 * 3.14159265358979323846 * k / n_views;
        Vec3 eye = center + Vec3{radius * std::sin(az), 0.0, -radius * std::cos(az)};
        Camera cam = Camera::look_at(eye, center, {0, 1, 0}, vertical_fov,
                                     static_cast<double>(width) / height, 0.01, radius * 100.0);
        GuidancePack pack = rasterize({{&fg, RigidTransform{}, true}}, cam, width, height);
        views.emplace_back(std::move(pack.rgb), std::move(pack.coverage_mask));
    }
    return views;
}

// Camera for the k-th of n novel views; exposed so callers can render
// held-out azimuths with the same geometry.
inline Camera novel_view_camera(const Mesh& fg, double azimuth, double radius, int width, int height,
                                double vertical_fov = 1.0471975511965976) {
    Vec3 center = fg.centroid();
    Vec3 eye = center + Vec3{radius * std::sin(azimuth), 0.0, -radius * std::cos(azimuth)};
    return Camera::look_at(eye, center, {0, 1, 0}, vertical_fov,
                           static_cast<double>(width) / height, 0.01, radius * 100.0);
}

// ---- scene description file ----
//
// Line-oriented text format ('#' starts a comment):
//
//   frames <n>
//   mesh <name> foreground|background
//     primitive quad <w> <h> color <r> <g> <b>
//     primitive box <sx> <sy> <sz> front <r> <g> <b> back <r> <g> <b>
//     primitive checker-plane <size_x> <size_z> <cells> colors <r g b> <r g b>
//     vertex <x> <y> <z> <r> <g> <b>      (inline geometry, repeated)
//     face <i> <j> <k>
//   anim <meshname>
//     key <frame> translate <x y z> axis <x y z> angle <radians> scale <s>
//   camera
//     eye <x y z>
//     look_at <x y z>
//     up <x y z>
//     fov_deg <v>
//     aspect <v>
//     near <v>
//     far <v>
//     trajectory static
//     trajectory orbit angle_deg <v> [center <x y z>] [axis <x y z>]
//     trajectory pan dx <v> dy <v>
//     trajectory zoom delta_fov_deg <v>
//     trajectory dolly distance <v>
//
// Animation keys interpolate linearly between bracketing frames (rotation via
// quaternion slerp) and clamp outside the keyed range.

struct AnimKey {
    int frame = 0;
    Vec3 translate{0, 0, 0};
    Vec3 axis{0, 1, 0};
    double angle = 0.0;
    double scale = 1.0;
};

struct SceneDescription {
    int n_frames = 1;
    Mesh foreground;
    bool has_foreground = false;
    std::optional<Mesh> background;
    std::vector<AnimKey> fg_keys;
    Vec3 cam_eye{0, 0, -2};
    Vec3 cam_look_at{0, 0, 0};
    Vec3 cam_up{0, 1, 0};
    double cam_fov = 1.0471975511965976;
    double cam_aspect = 1.0;
    double cam_near = 0.05;
    double cam_far = 100.0;
    TrajectoryKind traj_kind = TrajectoryKind::Static;
    TrajectoryParams traj_params;
};

namespace scene_detail {

struct LineError : ConfigError {
    using ConfigError::ConfigError;
};

inline double to_num(const std::string& tok, const std::string& file, int line) {
    try {
        size_t pos = 0;
        double v = std::stod(tok, &pos);
        if (pos != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(file + ":" + std::to_string(line) + ": expected number, got '" + tok + "'");
    }
}

inline RigidTransform key_to_transform(const AnimKey& k) {
    RigidTransform t;
    t.rotation = Quat::from_axis_angle(k.axis, k.angle).to_mat3();
    t.translation = k.translate;
    t.uniform_scale = k.scale;
    return t;
}

inline RigidTransform interp_keys(const std::vector<AnimKey>& keys, int frame) {
    if (keys.empty()) return RigidTransform{};
    if (frame <= keys.front().frame) return key_to_transform(keys.front());
    if (frame >= keys.back().frame) return key_to_transform(keys.back());
    size_t hi = 1;
    while (keys[hi].frame < frame) hi++;
    const AnimKey& a = keys[hi - 1];
    const AnimKey& b = keys[hi];
    if (keys[hi].frame == frame) return key_to_transform(b);
    double u = static_cast<double>(frame - a.frame) / (b.frame - a.frame);
    RigidTransform t;
    Quat qa = Quat::from_axis_angle(a.axis, a.angle);
    Quat qb = Quat::from_axis_angle(b.axis, b.angle);
    t.rotation = Quat::slerp(qa, qb, u).to_mat3();
    t.translation = a.translate + (b.translate - a.translate) * u;
    t.uniform_scale = a.scale + (b.scale - a.scale) * u;
    return t;
}

}  // namespace scene_detail

inline SceneDescription parse_scene_text(const std::string& text, const std::string& filename) {
    SceneDescription desc;
    std::istringstream input(text);
    std::string raw;
    int line_no = 0;

    enum class Section { None, Mesh, Anim, Camera };
    Section section = Section::None;
    Mesh* cur_mesh = nullptr;
    std::string cur_anim_target;
    std::string fg_name;
    bool saw_frames = false;

    auto fail = [&](const std::string& msg) -> void {
        throw ConfigError(filename + ":" + std::to_string(line_no) + ": " + msg);
    };
    auto num = [&](const std::string& tok) { return scene_detail::to_num(tok, filename, line_no); };

    while (std::getline(input, raw)) {
        line_no++;
        std::string line = raw;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream ls(line);
        std::vector<std::string> tok;
        std::string t;
        while (ls >> t) tok.push_back(t);
        if (tok.empty()) continue;

        const std::string& head = tok[0];
        if (head == "frames") {
            if (tok.size() != 2) fail("frames needs one integer argument");
            desc.n_frames = static_cast<int>(num(tok[1]));
            if (desc.n_frames < 1) fail("frames must be >= 1");
            saw_frames = true;
        } else if (head == "mesh") {
            if (tok.size() != 3) fail("mesh needs: mesh <name> foreground|background");
            if (tok[2] == "foreground") {
                if (desc.has_foreground) fail("scene already has a foreground mesh");
                desc.has_foreground = true;
                fg_name = tok[1];
                cur_mesh = &desc.foreground;
            } else if (tok[2] == "background") {
                if (desc.background) fail("scene already has a background mesh");
                desc.background = Mesh{};
                cur_mesh = &*desc.background;
            } else {
                fail("mesh tag must be 'foreground' or 'background'");
            }
            section = Section::Mesh;
        } else if (head == "anim") {
            if (tok.size() != 2) fail("anim needs a mesh name");
            if (!desc.has_foreground || tok[1] != fg_name) {
                fail("anim target '" + tok[1] + "' is not the foreground mesh");
            }
            cur_anim_target = tok[1];
            section = Section::Anim;
        } else if (head == "camera") {
            section = Section::Camera;
        } else if (section == Section::Mesh) {
            if (cur_mesh == nullptr) fail("mesh directive outside a mesh block");
            if (head == "primitive") {
                if (tok.size() < 2) fail("primitive needs a kind");
                if (tok[1] == "quad") {
                    if (tok.size() != 8 || tok[4] != "color") {
                        fail("usage: primitive quad <w> <h> color <r> <g> <b>");
                    }
                    *cur_mesh = make_quad(num(tok[2]), num(tok[3]),
                                          {num(tok[5]), num(tok[6]), num(tok[7])});
                } else if (tok[1] == "box") {
                    if (tok.size() != 13 || tok[5] != "front" || tok[9] != "back") {
                        fail("usage: primitive box <sx> <sy> <sz> front <r g b> back <r g b>");
                    }
                    *cur_mesh = make_box(num(tok[2]), num(tok[3]), num(tok[4]),
                                         {num(tok[6]), num(tok[7]), num(tok[8])},
                                         {num(tok[10]), num(tok[11]), num(tok[12])});
                } else if (tok[1] == "checker-plane") {
                    if (tok.size() != 12 || tok[5] != "colors") {
                        fail("usage: primitive checker-plane <sx> <sz> <cells> colors <r g b> <r g b>");
                    }
                    *cur_mesh = make_checker_plane(num(tok[2]), num(tok[3]),
                                                   static_cast<int>(num(tok[4])),
                                                   {num(tok[6]), num(tok[7]), num(tok[8])},
                                                   {num(tok[9]), num(tok[10]), num(tok[11])});
                } else {
                    fail("unknown primitive '" + tok[1] + "'");
                }
            } else if (head == "vertex") {
                if (tok.size() != 7) fail("usage: vertex <x> <y> <z> <r> <g> <b>");
                cur_mesh->vertices.push_back({num(tok[1]), num(tok[2]), num(tok[3])});
                cur_mesh->vertex_colors.push_back({num(tok[4]), num(tok[5]), num(tok[6])});
            } else if (head == "face") {
                if (tok.size() != 4) fail("usage: face <i> <j> <k>");
                cur_mesh->faces.push_back({static_cast<int>(num(tok[1])),
                                           static_cast<int>(num(tok[2])),
                                           static_cast<int>(num(tok[3]))});
            } else {
                fail("unknown mesh directive '" + head + "'");
            }
        } else if (section == Section::Anim) {
            if (head != "key") fail("unknown anim directive '" + head + "'");
            if (tok.size() != 14 || tok[2] != "translate" || tok[6] != "axis" || tok[10] != "angle" ||
                tok[12] != "scale") {
                fail("usage: key <frame> translate <x y z> axis <x y z> angle <a> scale <s>");
            }
            AnimKey k;
            k.frame = static_cast<int>(num(tok[1]));
            k.translate = {num(tok[3]), num(tok[4]), num(tok[5])};
            k.axis = {num(tok[7]), num(tok[8]), num(tok[9])};
            k.angle = num(tok[11]);
            k.scale = num(tok[13]);
            if (!desc.fg_keys.empty() && k.frame <= desc.fg_keys.back().frame) {
                fail("anim keys must have strictly increasing frames");
            }
            desc.fg_keys.push_back(k);
        } else if (section == Section::Camera) {
            if (head == "eye" && tok.size() == 4) {
                desc.cam_eye = {num(tok[1]), num(tok[2]), num(tok[3])};
            } else if (head == "look_at" && tok.size() == 4) {
                desc.cam_look_at = {num(tok[1]), num(tok[2]), num(tok[3])};
            } else if (head == "up" && tok.size() == 4) {
                desc.cam_up = {num(tok[1]), num(tok[2]), num(tok[3])};
            } else if (head == "fov_deg" && tok.size() == 2) {
                desc.cam_fov = num(tok[1]) * 3.14159265358979323846 / 180.0;
            } else if (head == "aspect" && tok.size() == 2) {
                desc.cam_aspect = num(tok[1]);
            } else if (head == "near" && tok.size() == 2) {
                desc.cam_near = num(tok[1]);
            } else if (head == "far" && tok.size() == 2) {
                desc.cam_far = num(tok[1]);
            } else if (head == "trajectory") {
                if (tok.size() < 2) fail("trajectory needs a kind");
                desc.traj_kind = trajectory_kind_from_string(tok[1]);
                size_t i = 2;
                while (i < tok.size()) {
                    const std::string& key = tok[i];
                    if (key == "angle_deg" && i + 1 < tok.size()) {
                        desc.traj_params.orbit_angle = num(tok[i + 1]) * 3.14159265358979323846 / 180.0;
                        i += 2;
                    } else if (key == "center" && i + 3 < tok.size()) {
                        desc.traj_params.orbit_center = {num(tok[i + 1]), num(tok[i + 2]),
                                                         num(tok[i + 3])};
                        i += 4;
                    } else if (key == "axis" && i + 3 < tok.size()) {
                        desc.traj_params.orbit_axis = {num(tok[i + 1]), num(tok[i + 2]),
                                                       num(tok[i + 3])};
                        i += 4;
                    } else if (key == "dx" && i + 1 < tok.size()) {
                        desc.traj_params.pan_x = num(tok[i + 1]);
                        i += 2;
                    } else if (key == "dy" && i + 1 < tok.size()) {
                        desc.traj_params.pan_y = num(tok[i + 1]);
                        i += 2;
                    } else if (key == "delta_fov_deg" && i + 1 < tok.size()) {
                        desc.traj_params.zoom_delta_fov = num(tok[i + 1]) * 3.14159265358979323846 / 180.0;
                        i += 2;
                    } else if (key == "distance" && i + 1 < tok.size()) {
                        desc.traj_params.dolly_distance = num(tok[i + 1]);
                        i += 2;
                    } else {
                        fail("unknown trajectory parameter '" + key + "'");
                    }
                }
            } else {
                fail("unknown camera directive '" + head + "'");
            }
        } else {
            fail("unknown directive '" + head + "'");
        }
    }

    if (!saw_frames) throw ConfigError(filename + ": missing 'frames' directive");
    if (!desc.has_foreground) throw ConfigError(filename + ": scene needs a foreground mesh");
    try {
        desc.foreground.validate();
        if (desc.background) desc.background->validate();
    } catch (const ContractError& e) {
        throw ConfigError(filename + ": invalid mesh: " + e.what());
    }
    return desc;
}

inline SceneDescription load_scene_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open scene file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_scene_text(ss.str(), path);
}

inline SceneAnimation build_scene_animation(const SceneDescription& desc) {
    SceneAnimation scene;
    scene.n_frames = desc.n_frames;
    scene.foreground = desc.foreground;
    scene.background = desc.background;
    for (int f = 0; f < desc.n_frames; f++) {
        scene.fg_transforms.push_back(scene_detail::interp_keys(desc.fg_keys, f));
    }
    Camera base = Camera::look_at(desc.cam_eye, desc.cam_look_at, desc.cam_up, desc.cam_fov,
                                  desc.cam_aspect, desc.cam_near, desc.cam_far);
    scene.camera_track = make_camera_trajectory(base, desc.traj_kind, desc.traj_params, desc.n_frames);
    scene.validate();
    return scene;
}

}  // namespace r2v
