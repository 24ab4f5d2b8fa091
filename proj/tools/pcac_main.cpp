#include "pcac/coder.hpp"
#include "pcac/eval.hpp"
#include "pcac/network.hpp"
#include "pcac/pcio.hpp"
#include "pcac/train.hpp"
#include "pcac/weights.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace {

using nlohmann::json;
using namespace pcac;

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// key = value lines, '#' comments
std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open config " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    auto trim = [](std::string s) {
        size_t a = s.find_first_not_of(" \t\r");
        size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(f, line)) {
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (!key.empty()) kv[key] = val;
    }
    return kv;
}

struct EncodeArgs {
    std::string input, weights, output, geometry, recon;
    int bit_depth = 10;
    double lambda = 0.0;
};

int run_encode(const EncodeArgs& a) {
    auto t0 = std::chrono::steady_clock::now();
    weights::LoadedModel lm = weights::load_model(a.weights);
    pcio::PointCloud pc = pcio::voxelize(pcio::load_ply(a.input), a.bit_depth);
    if (!a.geometry.empty()) {
        pcio::PointCloud g = pcio::voxelize(pcio::load_ply(a.geometry), a.bit_depth);
        if (g.coords != pc.coords) throw DataError("geometry does not match input voxels");
    }
    net::EncodeResult res =
        net::encode_cloud(pc, lm.model, lm.digest, static_cast<float>(a.lambda));
    write_file(a.output, res.bitstream);
    if (!a.recon.empty()) pcio::save_ply(pcio::to_raw(res.recon), a.recon, true);
    json stats = {{"points", pc.size()},
                  {"bpp", eval::bpp(res.bitstream.size() * 8, pc.size())},
                  {"seconds", seconds_since(t0)}};
    std::cout << stats.dump() << "\n";
    return 0;
}

struct DecodeArgs {
    std::string input, geometry, weights, output;
};

int run_decode(const DecodeArgs& a) {
    auto t0 = std::chrono::steady_clock::now();
    weights::LoadedModel lm = weights::load_model(a.weights);
    std::vector<uint8_t> bitstream = read_file(a.input);
    coder::UnpackedBitstream header = coder::unpack_bitstream(bitstream);
    pcio::PointCloud geometry =
        pcio::voxelize(pcio::load_ply(a.geometry), header.header.bit_depth);
    net::DecodeResult res = net::decode_cloud(bitstream, geometry, lm.model, lm.digest);
    pcio::save_ply(pcio::to_raw(res.recon), a.output, true);
    json stats = {{"points", res.recon.size()}, {"seconds", seconds_since(t0)}};
    std::cout << stats.dump() << "\n";
    return 0;
}

struct ResampleArgs {
    std::string input, output_prefix;
    int bit_depth = 10;
    int cluster_size = 100000;
    int frame = 0;
};

int run_resample(const ResampleArgs& a) {
    pcio::PointCloud pc = pcio::voxelize(pcio::load_ply(a.input), a.bit_depth);
    pcio::ResampleConfig cfg;
    cfg.cluster_point_count = a.cluster_size;
    pcio::ResampleResult res = pcio::resample(pc, cfg);
    pcio::write_blocks(res, a.output_prefix, a.input, a.frame);
    json stats = {{"points", pc.size()},
                  {"blocks", res.blocks.size()},
                  {"block_points", res.blocks.empty() ? 0 : res.blocks[0].size()}};
    std::cout << stats.dump() << "\n";
    return 0;
}

struct TrainArgs {
    std::vector<std::string> block_files;
    std::string index_file, config_file, out, init_weights;
    int bit_depth = 10;
    double lambda = 16000.0;
    double lr = 1e-4;
    int phase1_steps = 0;
    int phase2_steps = 500;
    uint64_t seed = 1;
};

int run_train(TrainArgs a) {
    net::CodecConfig cfg;
    if (!a.config_file.empty()) {
        auto kv = parse_config_file(a.config_file);
        auto geti = [&](const char* k, int& dst) {
            if (kv.count(k)) dst = std::stoi(kv[k]);
        };
        auto getd = [&](const char* k, double& dst) {
            if (kv.count(k)) dst = std::stod(kv[k]);
        };
        getd("lambda", a.lambda);
        getd("lr", a.lr);
        geti("phase1_steps", a.phase1_steps);
        geti("phase2_steps", a.phase2_steps);
        if (kv.count("seed")) a.seed = std::stoull(kv["seed"]);
        geti("bit_depth", a.bit_depth);
        geti("feature_channels", cfg.feature_channels);
        geti("latent_channels", cfg.latent_channels);
        geti("hyper_channels", cfg.hyper_channels);
        geti("context_channels", cfg.context_channels);
        geti("slice_count", cfg.slice_count);
        geti("window_side", cfg.window_side);
        geti("head_count", cfg.head_count);
        geti("kernel", cfg.kernel);
    }

    std::vector<std::string> files = a.block_files;
    if (!a.index_file.empty()) {
        json index = json::parse(read_file(a.index_file));
        for (const auto& entry : index) files.push_back(entry.at("file").get<std::string>());
    }
    if (files.empty()) throw DataError("no training blocks given");
    std::vector<pcio::PointCloud> blocks;
    for (const auto& f : files) blocks.push_back(pcio::voxelize(pcio::load_ply(f), a.bit_depth));

    net::Model model = net::make_model(cfg, a.seed);
    if (!a.init_weights.empty()) {
        weights::LoadedModel lm = weights::load_model(a.init_weights);
        model = std::move(lm.model);
    }

    train::TrainConfig tc;
    tc.lambda = static_cast<float>(a.lambda);
    tc.lr = static_cast<float>(a.lr);
    tc.phase1_steps = a.phase1_steps;
    tc.phase2_steps = a.phase2_steps;
    tc.seed = a.seed;
    train::FitResult fr = train::fit(model, blocks, tc);

    weights::save_model(model, a.out);
    auto params = weights::collect_params(model);
    json stats = {{"steps", fr.losses.size()},
                  {"final_loss", fr.losses.empty() ? 0.0 : fr.losses.back()},
                  {"lambda", a.lambda},
                  {"weights", a.out}};
    std::cout << stats.dump() << "\n";
    return 0;
}

struct EvalArgs {
    std::string input, recon, bin;
    int bit_depth = 10;
    int64_t bits = -1;
};

int run_eval(const EvalArgs& a) {
    pcio::PointCloud orig = pcio::voxelize(pcio::load_ply(a.input), a.bit_depth);
    pcio::PointCloud recon = pcio::voxelize(pcio::load_ply(a.recon), a.bit_depth);
    json stats = {{"points", orig.size()}, {"psnr_y", eval::psnr_y(orig, recon)}};
    if (!a.bin.empty())
        stats["bpp"] = eval::bpp(read_file(a.bin).size() * 8, orig.size());
    else if (a.bits >= 0)
        stats["bpp"] = eval::bpp(static_cast<size_t>(a.bits), orig.size());
    std::cout << stats.dump() << "\n";
    return 0;
}

struct ReportArgs {
    std::string curves_csv, reference, out_csv, out_json;
};

int run_report(const ReportArgs& a) {
    std::ifstream f(a.curves_csv);
    if (!f) throw DataError("cannot open " + a.curves_csv);
    std::string line;
    if (!std::getline(f, line)) throw DataError("empty curves file");
    std::map<std::pair<std::string, std::string>, eval::RDCurve> curves;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string codec, lambda, sequence, bpp_s, psnr_s;
        if (!std::getline(ss, codec, ',') || !std::getline(ss, lambda, ',') ||
            !std::getline(ss, sequence, ',') || !std::getline(ss, bpp_s, ',') ||
            !std::getline(ss, psnr_s))
            throw DataError("malformed curve row: " + line);
        auto& c = curves[{codec, sequence}];
        c.codec = codec;
        c.sequence = sequence;
        c.points.push_back({std::stod(bpp_s), std::stod(psnr_s), std::stod(lambda)});
    }
    std::vector<eval::RDCurve> list;
    for (auto& [key, c] : curves) {
        std::sort(c.points.begin(), c.points.end(),
                  [](const eval::RDPoint& x, const eval::RDPoint& y) { return x.bpp < y.bpp; });
        list.push_back(std::move(c));
    }
    std::string csv = eval::rd_report_csv(list);
    std::string js = eval::rd_report_json(list, a.reference);
    if (!a.out_csv.empty()) write_file(a.out_csv, {csv.begin(), csv.end()});
    if (!a.out_json.empty()) write_file(a.out_json, {js.begin(), js.end()});
    std::cout << js << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"learned point cloud attribute codec"};
    app.require_subcommand(1);

    EncodeArgs enc;
    auto* enc_cmd = app.add_subcommand("encode", "compress attributes of a voxelized cloud");
    enc_cmd->add_option("--input", enc.input, "input PLY")->required();
    enc_cmd->add_option("--weights", enc.weights, "weights file")->required();
    enc_cmd->add_option("--output", enc.output, "output bitstream")->required();
    enc_cmd->add_option("--geometry", enc.geometry, "shared geometry PLY (defaults to input)");
    enc_cmd->add_option("--recon", enc.recon, "write encoder-side reconstruction PLY");
    enc_cmd->add_option("--bit-depth", enc.bit_depth, "voxelization bit depth")
        ->check(CLI::Range(4, 16));
    enc_cmd->add_option("--lambda", enc.lambda, "rate point tag stored in the stream");

    DecodeArgs dec;
    auto* dec_cmd = app.add_subcommand("decode", "reconstruct attributes from a bitstream");
    dec_cmd->add_option("--input", dec.input, "input bitstream")->required();
    dec_cmd->add_option("--geometry", dec.geometry, "shared geometry PLY")->required();
    dec_cmd->add_option("--weights", dec.weights, "weights file")->required();
    dec_cmd->add_option("--output", dec.output, "output PLY")->required();

    ResampleArgs rs;
    auto* rs_cmd = app.add_subcommand("resample", "farthest-point sample and cluster into blocks");
    rs_cmd->add_option("--input", rs.input, "input PLY")->required();
    rs_cmd->add_option("--output-prefix", rs.output_prefix, "block file prefix")->required();
    rs_cmd->add_option("--bit-depth", rs.bit_depth, "voxelization bit depth")
        ->check(CLI::Range(4, 16));
    rs_cmd->add_option("--cluster-size", rs.cluster_size, "points per block")
        ->check(CLI::PositiveNumber);
    rs_cmd->add_option("--frame", rs.frame, "frame id recorded in the index");

    TrainArgs tr;
    auto* tr_cmd = app.add_subcommand("train", "fit weights on resampled blocks");
    tr_cmd->add_option("--block", tr.block_files, "training block PLY (repeatable)");
    tr_cmd->add_option("--blocks", tr.index_file, "block index JSON from resample");
    tr_cmd->add_option("--config", tr.config_file, "key = value config file");
    tr_cmd->add_option("--out", tr.out, "output weights file")->required();
    tr_cmd->add_option("--init-weights", tr.init_weights, "start from existing weights");
    tr_cmd->add_option("--bit-depth", tr.bit_depth, "voxelization bit depth")
        ->check(CLI::Range(4, 16));
    tr_cmd->add_option("--lambda", tr.lambda, "rate-distortion weight");
    tr_cmd->add_option("--lr", tr.lr, "learning rate");
    tr_cmd->add_option("--phase1-steps", tr.phase1_steps, "steps with context bypassed");
    tr_cmd->add_option("--phase2-steps", tr.phase2_steps, "joint steps");
    tr_cmd->add_option("--seed", tr.seed, "init seed");

    EvalArgs ev;
    auto* ev_cmd = app.add_subcommand("eval", "luminance PSNR and bits per point");
    ev_cmd->add_option("--input", ev.input, "original PLY")->required();
    ev_cmd->add_option("--recon", ev.recon, "reconstructed PLY")->required();
    ev_cmd->add_option("--bin", ev.bin, "bitstream file for bpp");
    ev_cmd->add_option("--bits", ev.bits, "total bits for bpp");
    ev_cmd->add_option("--bit-depth", ev.bit_depth, "voxelization bit depth")
        ->check(CLI::Range(4, 16));

    ReportArgs rp;
    auto* rp_cmd = app.add_subcommand("rd-report", "emit RD tables and Bjontegaard deltas");
    rp_cmd->add_option("--curves", rp.curves_csv, "input CSV: codec,lambda,sequence,bpp,psnr_y")
        ->required();
    rp_cmd->add_option("--reference", rp.reference, "reference codec label")->required();
    rp_cmd->add_option("--out-csv", rp.out_csv, "normalized CSV output");
    rp_cmd->add_option("--out-json", rp.out_json, "JSON report output");

    try {
        app.parse(argc, argv);
        if (enc_cmd->parsed()) return run_encode(enc);
        if (dec_cmd->parsed()) return run_decode(dec);
        if (rs_cmd->parsed()) return run_resample(rs);
        if (tr_cmd->parsed()) return run_train(tr);
        if (ev_cmd->parsed()) return run_eval(ev);
        if (rp_cmd->parsed()) return run_report(rp);
        return 1;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const pcio::PlyError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const coder::BitstreamError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const net::CodecError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const weights::WeightsError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
}
