#include "t2is/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "t2is/error.hpp"

namespace t2is {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'T', '2', 'I', 'S', 'C', 'K', 'P', 'T'};

template <typename U>
void put(std::ostream& out, U v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& in, const char* what) {
    U v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(U))) throw ParseError(std::string("checkpoint: truncated ") + what);
    return v;
}

std::string get_string(std::istream& in, std::uint32_t limit, const char* what) {
    const auto len = get<std::uint32_t>(in, what);
    if (len > limit) throw ParseError(std::string("checkpoint: implausible length for ") + what);
    std::string s(len, '\0');
    if (len && !in.read(s.data(), len)) throw ParseError(std::string("checkpoint: truncated ") + what);
    return s;
}

}  // namespace

std::string config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["n_layers"] = c.n_layers;
    j["mlp_hidden"] = c.mlp_hidden;
    j["image_side"] = c.image_side;
    j["patch_side"] = c.patch_side;
    j["prompt_vocab_size"] = c.prompt_vocab_size;
    j["max_prompt_len"] = c.max_prompt_len;
    j["max_global_len"] = c.max_global_len;
    j["rope_base"] = c.rope_base;
    j["rope_scale"] = c.rope_scale;
    j["distance_slope"] = c.distance_slope;
    j["balance_text_attention"] = c.balance_text_attention;
    j["joint_text_queries"] = c.joint_text_queries;
    return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
    if (!j.is_object()) throw ParseError("model config: expected a JSON object");
    ModelConfig c;
    try {
        c.d_model = j.value("d_model", c.d_model);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.n_layers = j.value("n_layers", c.n_layers);
        c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
        c.image_side = j.value("image_side", c.image_side);
        c.patch_side = j.value("patch_side", c.patch_side);
        c.prompt_vocab_size = j.value("prompt_vocab_size", c.prompt_vocab_size);
        c.max_prompt_len = j.value("max_prompt_len", c.max_prompt_len);
        c.max_global_len = j.value("max_global_len", c.max_global_len);
        c.rope_base = j.value("rope_base", c.rope_base);
        c.rope_scale = j.value("rope_scale", c.rope_scale);
        c.distance_slope = j.value("distance_slope", c.distance_slope);
        c.balance_text_attention = j.value("balance_text_attention", c.balance_text_attention);
        c.joint_text_queries = j.value("joint_text_queries", c.joint_text_queries);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

void save_checkpoint(std::ostream& out, const ModelParams<float>& params) {
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    const auto cfg = config_to_json(params.config);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    std::uint32_t count = 0;
    params.for_each([&](const std::string&, const Tensor&) { ++count; });
    put<std::uint32_t>(out, count);
    params.for_each([&](const std::string& name, const Tensor& t) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) put<std::uint64_t>(out, d);
        out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    });
    if (!out) throw Error("checkpoint: write failed");
}

ModelParams<float> load_checkpoint(std::istream& in) {
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
        throw ParseError("checkpoint: bad magic, not a checkpoint file");
    }
    const auto version = get<std::uint32_t>(in, "version");
    if (version != kCheckpointVersion) {
        throw ParseError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto cfg = config_from_json(get_string(in, 1 << 16, "config"));
    auto params = ModelParams<float>::initialized(cfg, 0);
    const auto count = get<std::uint32_t>(in, "tensor count");
    std::uint32_t expected = 0;
    params.for_each([&](const std::string&, const Tensor&) { ++expected; });
    if (count != expected) {
        throw ParseError("checkpoint: " + std::to_string(count) + " tensors, config implies " + std::to_string(expected));
    }
    params.for_each([&](const std::string& name, Tensor& t) {
        const auto got = get_string(in, 256, "tensor name");
        if (got != name) throw ParseError("checkpoint: expected tensor '" + name + "', found '" + got + "'");
        const auto rank = get<std::uint32_t>(in, "rank");
        if (rank == 0 || rank > 4) throw ParseError("checkpoint: tensor '" + name + "' has rank " + std::to_string(rank));
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get<std::uint64_t>(in, "dims"));
        if (shape != t.shape()) {
            throw ParseError("checkpoint: tensor '" + name + "' is " + shape_str(shape) + ", expected " +
                             shape_str(t.shape()));
        }
        if (!in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(float)))) {
            throw ParseError("checkpoint: truncated data for '" + name + "'");
        }
    });
    if (!params.all_finite()) throw ParseError("checkpoint: non-finite parameter values");
    return params;
}

void save_checkpoint_file(const std::string& path, const ModelParams<float>& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("checkpoint: cannot open " + path + " for writing");
    save_checkpoint(out, params);
}

ModelParams<float> load_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("checkpoint: cannot open " + path);
    return load_checkpoint(in);
}

}  // namespace t2is
