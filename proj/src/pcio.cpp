#include "pcac/pcio.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace pcac::pcio {

namespace {

enum class PropType { kFloat32, kFloat64, kUint8, kInt8, kUint16, kInt16, kUint32, kInt32 };

size_t prop_size(PropType t) {
    switch (t) {
        case PropType::kUint8:
        case PropType::kInt8: return 1;
        case PropType::kUint16:
        case PropType::kInt16: return 2;
        case PropType::kUint32:
        case PropType::kInt32:
        case PropType::kFloat32: return 4;
        case PropType::kFloat64: return 8;
    }
    return 0;
}

bool parse_prop_type(const std::string& s, PropType& out) {
    if (s == "float" || s == "float32") out = PropType::kFloat32;
    else if (s == "double" || s == "float64") out = PropType::kFloat64;
    else if (s == "uchar" || s == "uint8") out = PropType::kUint8;
    else if (s == "char" || s == "int8") out = PropType::kInt8;
    else if (s == "ushort" || s == "uint16") out = PropType::kUint16;
    else if (s == "short" || s == "int16") out = PropType::kInt16;
    else if (s == "uint" || s == "uint32") out = PropType::kUint32;
    else if (s == "int" || s == "int32") out = PropType::kInt32;
    else return false;
    return true;
}

struct VertexProp {
    std::string name;
    PropType type;
};

double read_binary_prop(const uint8_t* p, PropType t) {
    switch (t) {
        case PropType::kFloat32: {
            float v;
            std::memcpy(&v, p, 4);
            return v;
        }
        case PropType::kFloat64: {
            double v;
            std::memcpy(&v, p, 8);
            return v;
        }
        case PropType::kUint8: return *p;
        case PropType::kInt8: return static_cast<int8_t>(*p);
        case PropType::kUint16: {
            uint16_t v;
            std::memcpy(&v, p, 2);
            return v;
        }
        case PropType::kInt16: {
            int16_t v;
            std::memcpy(&v, p, 2);
            return v;
        }
        case PropType::kUint32: {
            uint32_t v;
            std::memcpy(&v, p, 4);
            return v;
        }
        case PropType::kInt32: {
            int32_t v;
            std::memcpy(&v, p, 4);
            return v;
        }
    }
    return 0;
}

uint8_t to_color_byte(double v, const char* name) {
    if (v < 0.0 || v > 255.0 || v != std::floor(v))
        throw PlyError(std::string("color property out of byte range: ") + name);
    return static_cast<uint8_t>(v);
}

}  // namespace

RawPointCloud parse_ply(const std::vector<uint8_t>& bytes) {
    // Header is ASCII lines terminated by '\n' up to end_header.
    size_t pos = 0;
    auto next_line = [&]() -> std::string {
        if (pos >= bytes.size()) throw PlyError("unexpected end of header");
        size_t e = pos;
        while (e < bytes.size() && bytes[e] != '\n') ++e;
        if (e >= bytes.size()) throw PlyError("unexpected end of header");
        std::string line(reinterpret_cast<const char*>(bytes.data() + pos), e - pos);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        pos = e + 1;
        return line;
    };

    if (next_line() != "ply") throw PlyError("missing ply magic");

    bool binary = false;
    bool have_format = false;
    size_t vertex_count = 0;
    bool in_vertex_element = false;
    bool seen_vertex_element = false;
    bool vertex_element_done = false;
    std::vector<VertexProp> props;

    for (;;) {
        std::string line = next_line();
        std::istringstream ss(line);
        std::string tok;
        ss >> tok;
        if (tok == "comment" || tok == "obj_info" || tok.empty()) continue;
        if (tok == "format") {
            std::string fmt, ver;
            ss >> fmt >> ver;
            if (fmt == "ascii") binary = false;
            else if (fmt == "binary_little_endian") binary = true;
            else throw PlyError("unsupported format: " + fmt);
            have_format = true;
        } else if (tok == "element") {
            std::string name;
            size_t count = 0;
            ss >> name >> count;
            if (ss.fail()) throw PlyError("malformed element line");
            if (name == "vertex") {
                if (seen_vertex_element) throw PlyError("duplicate vertex element");
                seen_vertex_element = true;
                in_vertex_element = true;
                vertex_count = count;
            } else {
                if (in_vertex_element) {
                    in_vertex_element = false;
                    vertex_element_done = true;
                } else if (!seen_vertex_element && binary) {
                    // Can't skip an unknown-size element before vertex data.
                    throw PlyError("unsupported element before vertex: " + name);
                } else if (!seen_vertex_element) {
                    throw PlyError("unsupported element before vertex: " + name);
                }
            }
        } else if (tok == "property") {
            if (in_vertex_element) {
                std::string type_s, name;
                ss >> type_s;
                if (type_s == "list") throw PlyError("list property on vertex unsupported");
                ss >> name;
                if (ss.fail()) throw PlyError("malformed property line");
                PropType t;
                if (!parse_prop_type(type_s, t)) throw PlyError("unknown property type: " + type_s);
                props.push_back({name, t});
            }
            // properties of trailing elements are ignored
        } else if (tok == "end_header") {
            break;
        } else {
            throw PlyError("unknown header token: " + tok);
        }
    }
    if (!have_format) throw PlyError("missing format line");
    if (!seen_vertex_element) throw PlyError("missing vertex element");
    (void)vertex_element_done;

    int idx_x = -1, idx_y = -1, idx_z = -1, idx_r = -1, idx_g = -1, idx_b = -1;
    for (size_t i = 0; i < props.size(); ++i) {
        const std::string& n = props[i].name;
        if (n == "x") idx_x = static_cast<int>(i);
        else if (n == "y") idx_y = static_cast<int>(i);
        else if (n == "z") idx_z = static_cast<int>(i);
        else if (n == "red" || n == "r") idx_r = static_cast<int>(i);
        else if (n == "green" || n == "g") idx_g = static_cast<int>(i);
        else if (n == "blue" || n == "b") idx_b = static_cast<int>(i);
    }
    if (idx_x < 0 || idx_y < 0 || idx_z < 0) throw PlyError("missing x/y/z properties");
    if (idx_r < 0 || idx_g < 0 || idx_b < 0) throw PlyError("missing red/green/blue properties");

    RawPointCloud pc;
    pc.positions.reserve(vertex_count);
    pc.colors.reserve(vertex_count);

    if (binary) {
        size_t stride = 0;
        std::vector<size_t> offsets(props.size());
        for (size_t i = 0; i < props.size(); ++i) {
            offsets[i] = stride;
            stride += prop_size(props[i].type);
        }
        if (bytes.size() - pos < stride * vertex_count) throw PlyError("truncated vertex data");
        for (size_t v = 0; v < vertex_count; ++v) {
            const uint8_t* base = bytes.data() + pos + v * stride;
            auto get = [&](int i) { return read_binary_prop(base + offsets[i], props[i].type); };
            pc.positions.push_back({get(idx_x), get(idx_y), get(idx_z)});
            pc.colors.push_back({to_color_byte(get(idx_r), "red"), to_color_byte(get(idx_g), "green"),
                                 to_color_byte(get(idx_b), "blue")});
        }
    } else {
        std::string body(reinterpret_cast<const char*>(bytes.data() + pos), bytes.size() - pos);
        std::istringstream ss(body);
        std::vector<double> vals(props.size());
        for (size_t v = 0; v < vertex_count; ++v) {
            for (size_t i = 0; i < props.size(); ++i) {
                if (!(ss >> vals[i])) throw PlyError("truncated vertex data");
            }
            pc.positions.push_back({vals[idx_x], vals[idx_y], vals[idx_z]});
            pc.colors.push_back({to_color_byte(vals[idx_r], "red"),
                                 to_color_byte(vals[idx_g], "green"),
                                 to_color_byte(vals[idx_b], "blue")});
        }
    }
    return pc;
}

RawPointCloud load_ply(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw PlyError("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_ply(bytes);
}

std::vector<uint8_t> write_ply(const RawPointCloud& pc, bool binary) {
    std::ostringstream h;
    h << "ply\n"
      << "format " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n"
      << "element vertex " << pc.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\n"
      << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
      << "end_header\n";
    std::string header = h.str();
    std::vector<uint8_t> out(header.begin(), header.end());

    if (binary) {
        out.reserve(out.size() + pc.size() * 15);
        for (size_t i = 0; i < pc.size(); ++i) {
            for (int a = 0; a < 3; ++a) {
                float v = static_cast<float>(pc.positions[i][a]);
                uint8_t buf[4];
                std::memcpy(buf, &v, 4);
                out.insert(out.end(), buf, buf + 4);
            }
            for (int a = 0; a < 3; ++a) out.push_back(pc.colors[i][a]);
        }
    } else {
        std::ostringstream b;
        b.precision(9);
        for (size_t i = 0; i < pc.size(); ++i) {
            b << static_cast<float>(pc.positions[i][0]) << ' ' << static_cast<float>(pc.positions[i][1])
              << ' ' << static_cast<float>(pc.positions[i][2]) << ' ' << int(pc.colors[i][0]) << ' '
              << int(pc.colors[i][1]) << ' ' << int(pc.colors[i][2]) << '\n';
        }
        std::string body = b.str();
        out.insert(out.end(), body.begin(), body.end());
    }
    return out;
}

void save_ply(const RawPointCloud& pc, const std::string& path, bool binary) {
    auto bytes = write_ply(pc, binary);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw PlyError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {
// BT.709 full range
constexpr double kKr = 0.2126;
constexpr double kKg = 0.7152;
constexpr double kKb = 0.0722;
constexpr double kUScale = 1.8556;  // 2*(1-Kb)
constexpr double kVScale = 1.5748;  // 2*(1-Kr)
}  // namespace

std::array<double, 3> rgb_to_yuv(const std::array<double, 3>& rgb) {
    double r = rgb[0] / 255.0, g = rgb[1] / 255.0, b = rgb[2] / 255.0;
    double y = kKr * r + kKg * g + kKb * b;
    double u = (b - y) / kUScale + 0.5;
    double v = (r - y) / kVScale + 0.5;
    return {y, u, v};
}

std::array<double, 3> yuv_to_rgb(const std::array<double, 3>& yuv) {
    double y = yuv[0];
    double u = yuv[1] - 0.5;
    double v = yuv[2] - 0.5;
    double r = y + kVScale * v;
    double b = y + kUScale * u;
    double g = (y - kKr * r - kKb * b) / kKg;
    auto clamp255 = [](double x) { return std::min(255.0, std::max(0.0, x * 255.0)); };
    return {clamp255(r), clamp255(g), clamp255(b)};
}

PointCloud voxelize(const RawPointCloud& raw, int bit_depth) {
    if (bit_depth < 4 || bit_depth > 16) throw std::invalid_argument("bit_depth must be in [4,16]");
    if (raw.size() == 0) throw std::invalid_argument("voxelize: empty cloud");

    std::array<double, 3> mn = raw.positions[0];
    std::array<double, 3> mx = raw.positions[0];
    for (const auto& p : raw.positions)
        for (int a = 0; a < 3; ++a) {
            mn[a] = std::min(mn[a], p[a]);
            mx[a] = std::max(mx[a], p[a]);
        }
    double extent = 0.0;
    for (int a = 0; a < 3; ++a) extent = std::max(extent, mx[a] - mn[a]);
    const double limit = static_cast<double>((1 << bit_depth) - 1);
    const double scale = extent > limit ? limit / extent : 1.0;

    // voxel -> (sum RGB, count)
    std::map<std::array<int32_t, 3>, std::pair<std::array<double, 3>, int64_t>> buckets;
    for (size_t i = 0; i < raw.size(); ++i) {
        std::array<int32_t, 3> c;
        for (int a = 0; a < 3; ++a) {
            double q = (raw.positions[i][a] - mn[a]) * scale;
            c[a] = static_cast<int32_t>(std::lround(q));
            if (c[a] < 0) c[a] = 0;
            if (c[a] > static_cast<int32_t>(limit)) c[a] = static_cast<int32_t>(limit);
        }
        auto& slot = buckets[c];
        for (int a = 0; a < 3; ++a) slot.first[a] += raw.colors[i][a];
        slot.second += 1;
    }

    PointCloud pc;
    pc.bit_depth = bit_depth;
    pc.coords.reserve(buckets.size());
    pc.attrs = Mat<float>(static_cast<int>(buckets.size()), 3);
    int r = 0;
    for (const auto& [coord, slot] : buckets) {
        pc.coords.push_back(coord);
        std::array<double, 3> mean_rgb;
        for (int a = 0; a < 3; ++a) mean_rgb[a] = slot.first[a] / static_cast<double>(slot.second);
        auto yuv = rgb_to_yuv(mean_rgb);
        for (int a = 0; a < 3; ++a) pc.attrs(r, a) = static_cast<float>(yuv[a]);
        ++r;
    }
    return pc;
}

RawPointCloud to_raw(const PointCloud& pc) {
    RawPointCloud raw;
    raw.positions.reserve(pc.size());
    raw.colors.reserve(pc.size());
    for (size_t i = 0; i < pc.size(); ++i) {
        raw.positions.push_back({static_cast<double>(pc.coords[i][0]),
                                 static_cast<double>(pc.coords[i][1]),
                                 static_cast<double>(pc.coords[i][2])});
        auto rgb = yuv_to_rgb({pc.attrs(static_cast<int>(i), 0), pc.attrs(static_cast<int>(i), 1),
                               pc.attrs(static_cast<int>(i), 2)});
        raw.colors.push_back({static_cast<uint8_t>(std::lround(rgb[0])),
                              static_cast<uint8_t>(std::lround(rgb[1])),
                              static_cast<uint8_t>(std::lround(rgb[2]))});
    }
    return raw;
}

namespace {
double sq_dist(const std::array<int32_t, 3>& a, const std::array<int32_t, 3>& b) {
    double s = 0;
    for (int i = 0; i < 3; ++i) {
        double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return s;
}
}  // namespace

std::vector<int32_t> farthest_point_sample(const PointCloud& pc, int k) {
    const int n = static_cast<int>(pc.size());
    if (k < 1 || k > n) throw std::invalid_argument("farthest_point_sample: k out of range");
    std::vector<int32_t> centers;
    centers.reserve(k);
    centers.push_back(0);
    std::vector<double> min_d(n);
    for (int i = 0; i < n; ++i) min_d[i] = sq_dist(pc.coords[i], pc.coords[0]);
    while (static_cast<int>(centers.size()) < k) {
        int best = 0;
        double best_d = -1.0;
        for (int i = 0; i < n; ++i) {
            if (min_d[i] > best_d) {
                best_d = min_d[i];
                best = i;
            }
        }
        centers.push_back(best);
        for (int i = 0; i < n; ++i) min_d[i] = std::min(min_d[i], sq_dist(pc.coords[i], pc.coords[best]));
    }
    return centers;
}

std::vector<PointCloud> knn_cluster(const PointCloud& pc, const std::vector<int32_t>& centers,
                                    int m) {
    const int n = static_cast<int>(pc.size());
    if (m < 1 || m > n) throw std::invalid_argument("knn_cluster: m out of range");
    std::vector<PointCloud> blocks;
    blocks.reserve(centers.size());
    std::vector<std::pair<double, int32_t>> dist(n);
    for (int32_t c : centers) {
        for (int i = 0; i < n; ++i) dist[i] = {sq_dist(pc.coords[i], pc.coords[c]), i};
        std::partial_sort(dist.begin(), dist.begin() + m, dist.end());
        std::vector<int32_t> rows(m);
        for (int i = 0; i < m; ++i) rows[i] = dist[i].second;
        // canonical coordinate order within the block
        std::sort(rows.begin(), rows.end(),
                  [&](int32_t a, int32_t b) { return pc.coords[a] < pc.coords[b]; });
        PointCloud blk;
        blk.bit_depth = pc.bit_depth;
        blk.coords.reserve(m);
        blk.attrs = Mat<float>(m, 3);
        for (int i = 0; i < m; ++i) {
            blk.coords.push_back(pc.coords[rows[i]]);
            for (int a = 0; a < 3; ++a) blk.attrs(i, a) = pc.attrs(rows[i], a);
        }
        blocks.push_back(std::move(blk));
    }
    return blocks;
}

ResampleResult resample(const PointCloud& pc, const ResampleConfig& cfg) {
    if (cfg.cluster_point_count <= 0) throw std::invalid_argument("cluster_point_count must be > 0");
    const int n = static_cast<int>(pc.size());
    const int k = static_cast<int>(
        (static_cast<int64_t>(n) + cfg.cluster_point_count - 1) / cfg.cluster_point_count);
    ResampleResult res;
    res.center_indices = farthest_point_sample(pc, std::max(1, k));
    res.blocks = knn_cluster(pc, res.center_indices, std::min(cfg.cluster_point_count, n));
    return res;
}

void write_blocks(const ResampleResult& res, const std::string& prefix, const std::string& source,
                  int frame) {
    nlohmann::json index = nlohmann::json::array();
    for (size_t i = 0; i < res.blocks.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "_block%03zu.ply", i);
        std::string path = prefix + name;
        save_ply(to_raw(res.blocks[i]), path, true);
        index.push_back({{"source", source},
                         {"frame", frame},
                         {"center_index", res.center_indices[i]},
                         {"point_count", res.blocks[i].size()},
                         {"file", path}});
    }
    std::ofstream f(prefix + "_index.json", std::ios::trunc);
    if (!f) throw PlyError("cannot write block index");
    f << index.dump(2) << "\n";
}

}  // namespace pcac::pcio
