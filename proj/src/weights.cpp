#include "pcac/weights.hpp"

#include "json.hpp"

#include <cstring>
#include <fstream>

namespace pcac::weights {

using nlohmann::json;

namespace {
constexpr uint32_t kMagic = 0x54574350u;  // "PCWT"
constexpr int kFormatVersion = 1;

void put_u32(std::vector<uint8_t>& v, uint32_t x) {
    for (int i = 0; i < 4; ++i) v.push_back(static_cast<uint8_t>(x >> (8 * i)));
}

json config_json(const net::CodecConfig& c) {
    return {{"feature_channels", c.feature_channels}, {"latent_channels", c.latent_channels},
            {"hyper_channels", c.hyper_channels},     {"context_channels", c.context_channels},
            {"slice_count", c.slice_count},           {"encoder_stages", c.encoder_stages},
            {"hyper_stages", c.hyper_stages},         {"kernel", c.kernel},
            {"window_side", c.window_side},           {"head_count", c.head_count}};
}

net::CodecConfig config_from_json(const json& j) {
    net::CodecConfig c;
    c.feature_channels = j.at("feature_channels");
    c.latent_channels = j.at("latent_channels");
    c.hyper_channels = j.at("hyper_channels");
    c.context_channels = j.at("context_channels");
    c.slice_count = j.at("slice_count");
    c.encoder_stages = j.at("encoder_stages");
    c.hyper_stages = j.at("hyper_stages");
    c.kernel = j.at("kernel");
    c.window_side = j.at("window_side");
    c.head_count = j.at("head_count");
    return c;
}

std::vector<uint8_t> build_container(const json& manifest,
                                     const std::vector<const Mat<float>*>& tensors) {
    std::string manifest_str = manifest.dump();
    std::vector<uint8_t> out;
    put_u32(out, kMagic);
    put_u32(out, static_cast<uint32_t>(manifest_str.size()));
    out.insert(out.end(), manifest_str.begin(), manifest_str.end());
    for (const auto* t : tensors) {
        size_t bytes = t->size() * sizeof(float);
        size_t at = out.size();
        out.resize(at + bytes);
        std::memcpy(out.data() + at, t->data(), bytes);
    }
    return out;
}

struct ParsedContainer {
    json manifest;
    const uint8_t* blob;
    size_t blob_size;
};

ParsedContainer parse_container(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8) throw WeightsError("truncated weights file");
    uint32_t magic = 0, len = 0;
    std::memcpy(&magic, bytes.data(), 4);
    std::memcpy(&len, bytes.data() + 4, 4);
    if (magic != kMagic) throw WeightsError("not a weights file");
    if (bytes.size() < 8 + static_cast<size_t>(len)) throw WeightsError("truncated manifest");
    json manifest = json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
    return {std::move(manifest), bytes.data() + 8 + len, bytes.size() - 8 - len};
}

void read_tensors(const ParsedContainer& pc, const json& params,
                  const std::vector<Mat<float>*>& dst) {
    if (params.size() != dst.size()) throw WeightsError("parameter count mismatch");
    size_t at = 0;
    for (size_t i = 0; i < dst.size(); ++i) {
        int rows = params[i].at("rows");
        int cols = params[i].at("cols");
        if (dst[i]->rows() != rows || dst[i]->cols() != cols)
            throw WeightsError("parameter shape mismatch at " +
                               params[i].at("name").get<std::string>());
        size_t bytes = static_cast<size_t>(rows) * cols * sizeof(float);
        if (at + bytes > pc.blob_size) throw WeightsError("truncated weight blob");
        std::memcpy(dst[i]->data(), pc.blob + at, bytes);
        at += bytes;
    }
    if (at != pc.blob_size) throw WeightsError("trailing bytes in weight blob");
}

}  // namespace

std::vector<ParamRef> collect_params(net::Model& m) {
    std::vector<ParamRef> out;
    net::visit_model(m, [&](const std::string& name, Mat<float>& v) { out.push_back({name, &v}); });
    return out;
}

std::vector<uint8_t> serialize_model(const net::Model& m) {
    auto params = collect_params(const_cast<net::Model&>(m));
    json plist = json::array();
    std::vector<const Mat<float>*> tensors;
    for (const auto& p : params) {
        plist.push_back({{"name", p.name}, {"rows", p.value->rows()}, {"cols", p.value->cols()}});
        tensors.push_back(p.value);
    }
    json manifest = {{"format_version", kFormatVersion},
                     {"kind", "weights"},
                     {"color_matrix", "bt709-full"},
                     {"context_enabled", m.context_enabled},
                     {"config", config_json(m.cfg)},
                     {"params", plist}};
    return build_container(manifest, tensors);
}

void save_model(const net::Model& m, const std::string& path) {
    auto bytes = serialize_model(m);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw WeightsError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

net::Model parse_model(const std::vector<uint8_t>& bytes) {
    ParsedContainer pc = parse_container(bytes);
    if (pc.manifest.at("kind") != "weights") throw WeightsError("not a weights manifest");
    int version = pc.manifest.at("format_version");
    if (version != kFormatVersion)
        throw WeightsError("unsupported weights format version " + std::to_string(version));
    std::string cm = pc.manifest.at("color_matrix");
    if (cm != "bt709-full") throw WeightsError("unsupported color matrix " + cm);
    net::CodecConfig cfg = config_from_json(pc.manifest.at("config"));
    net::Model model = net::make_model(cfg, 0);
    model.context_enabled = pc.manifest.at("context_enabled");
    auto params = collect_params(model);
    std::vector<Mat<float>*> dst;
    for (auto& p : params) dst.push_back(p.value);
    read_tensors(pc, pc.manifest.at("params"), dst);
    return model;
}

LoadedModel load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw WeightsError("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    LoadedModel lm;
    lm.model = parse_model(bytes);
    lm.digest = fnv1a64(bytes);
    return lm;
}

uint64_t fnv1a64(const std::vector<uint8_t>& bytes) {
    uint64_t h = 14695981039346656037ull;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t model_digest(const net::Model& m) { return fnv1a64(serialize_model(m)); }

void save_state(const TrainState& s, const std::vector<ParamRef>& params, const std::string& path) {
    if (s.m1.size() != params.size() || s.m2.size() != params.size())
        throw WeightsError("state size mismatch");
    json plist = json::array();
    std::vector<const Mat<float>*> tensors;
    for (size_t i = 0; i < params.size(); ++i) {
        plist.push_back({{"name", params[i].name + ".m1"},
                         {"rows", s.m1[i].rows()},
                         {"cols", s.m1[i].cols()}});
        tensors.push_back(&s.m1[i]);
    }
    for (size_t i = 0; i < params.size(); ++i) {
        plist.push_back({{"name", params[i].name + ".m2"},
                         {"rows", s.m2[i].rows()},
                         {"cols", s.m2[i].cols()}});
        tensors.push_back(&s.m2[i]);
    }
    json manifest = {{"format_version", kFormatVersion},
                     {"kind", "train_state"},
                     {"step", s.step},
                     {"params", plist}};
    auto bytes = build_container(manifest, tensors);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw WeightsError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TrainState load_state(const std::string& path, const std::vector<ParamRef>& params) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw WeightsError("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    ParsedContainer pc = parse_container(bytes);
    if (pc.manifest.at("kind") != "train_state") throw WeightsError("not a train state file");
    TrainState s;
    s.step = pc.manifest.at("step");
    for (const auto& p : params) {
        s.m1.push_back(Mat<float>::zeros(p.value->rows(), p.value->cols()));
        s.m2.push_back(Mat<float>::zeros(p.value->rows(), p.value->cols()));
    }
    std::vector<Mat<float>*> dst;
    for (auto& m : s.m1) dst.push_back(&m);
    for (auto& m : s.m2) dst.push_back(&m);
    read_tensors(pc, pc.manifest.at("params"), dst);
    return s;
}

}  // namespace pcac::weights
