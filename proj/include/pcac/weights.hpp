#pragma once

#include "pcac/network.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace pcac::weights {

// name -> tensor pointer, in manifest order
struct ParamRef {
    std::string name;
    Mat<float>* value;
};

std::vector<ParamRef> collect_params(net::Model& m);

class WeightsError : public std::runtime_error {
public:
    explicit WeightsError(const std::string& msg) : std::runtime_error(msg) {}
};

// Container: magic, u32 JSON length, manifest JSON, then float32
// little-endian blobs in manifest order. The manifest records the codec
// config, the color matrix id and every tensor's name and shape.
std::vector<uint8_t> serialize_model(const net::Model& m);
void save_model(const net::Model& m, const std::string& path);

struct LoadedModel {
    net::Model model;
    uint64_t digest = 0;  // FNV-1a over the serialized bytes
};

net::Model parse_model(const std::vector<uint8_t>& bytes);
LoadedModel load_model(const std::string& path);

uint64_t fnv1a64(const std::vector<uint8_t>& bytes);
uint64_t model_digest(const net::Model& m);

// Optimizer sidecar: step counter plus first/second moment tensors in
// parameter order.
struct TrainState {
    int64_t step = 0;
    std::vector<Mat<float>> m1;
    std::vector<Mat<float>> m2;
};

void save_state(const TrainState& s, const std::vector<ParamRef>& params, const std::string& path);
TrainState load_state(const std::string& path, const std::vector<ParamRef>& params);

}  // namespace pcac::weights
