#include "vplan/model.hpp"
#include "vplan/json_io.hpp"

#include <bit>
#include <cstring>

// Layout (little-endian):
//   "VPLNCKPT" u32 version
//   u64 header length, header JSON {"config": ..., "meta": ...}
//   u32 tensor count
//   per tensor: u32 name length, name, u8 dtype (0 = f32), u8 trainable,
//               u32 ndim, u64 dims[ndim], raw data, u32 crc32(raw data)

namespace vplan {

namespace {

constexpr char kMagic[8] = {'V', 'P', 'L', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class U>
void put(std::string& out, U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.append(buf, sizeof(U));
}

class Reader {
public:
    Reader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

    template <class U>
    U get() {
        U v;
        std::memcpy(&v, take(sizeof(U)), sizeof(U));
        return v;
    }
    const char* take(std::size_t n) {
        if (n > bytes_.size() - pos_) throw DataError(path_ + ": truncated checkpoint");
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    const std::string& bytes_;
    const std::string& path_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const nlohmann::json& meta) {
    std::string out(kMagic, sizeof(kMagic));
    put(out, kVersion);
    const std::string header = nlohmann::json{{"config", to_json(model.config)}, {"meta", meta}}.dump();
    put(out, static_cast<std::uint64_t>(header.size()));
    out += header;
    put(out, static_cast<std::uint32_t>(model.params.tensors.size()));
    for (const auto& [name, t] : model.params.tensors) {
        put(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put(out, kDtypeF32);
        put(out, static_cast<std::uint8_t>(t.trainable ? 1 : 0));
        put(out, static_cast<std::uint32_t>(t.shape.size()));
        for (int s : t.shape) put(out, static_cast<std::uint64_t>(s));
        const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data.data());
        const std::size_t n = t.data.size() * sizeof(float);
        out.append(reinterpret_cast<const char*>(raw), n);
        put(out, crc32({raw, n}));
    }
    write_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::string bytes = read_file(path);
    Reader r(bytes, path);
    if (std::memcmp(r.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0) throw DataError(path + ": not a checkpoint");
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
    const auto header_len = r.get<std::uint64_t>();
    const std::string header(r.take(header_len), header_len);
    const auto hj = parse_json(header, path + " header");

    Checkpoint ck;
    ck.model.config = model_config_from_json(hj.at("config"));
    ck.model.config.validate();
    ck.meta = hj.value("meta", nlohmann::json::object());
    const auto n_tensors = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const auto name_len = r.get<std::uint32_t>();
        std::string name(r.take(name_len), name_len);
        const auto dtype = r.get<std::uint8_t>();
        if (dtype != kDtypeF32) throw DataError(path + ": tensor " + name + " has unsupported dtype");
        Tensor<float> t;
        t.trainable = r.get<std::uint8_t>() != 0;
        const auto ndim = r.get<std::uint32_t>();
        std::size_t numel = 1;
        for (std::uint32_t k = 0; k < ndim; ++k) {
            const auto dim = r.get<std::uint64_t>();
            if (dim > (1u << 30)) throw DataError(path + ": tensor " + name + " has an implausible shape");
            t.shape.push_back(static_cast<int>(dim));
            numel *= dim;
        }
        const std::size_t n = numel * sizeof(float);
        const char* raw = r.take(n);
        const auto stored = r.get<std::uint32_t>();
        if (crc32({reinterpret_cast<const std::uint8_t*>(raw), n}) != stored) {
            throw DataError(path + ": checksum mismatch in tensor " + name + " (corrupt file)");
        }
        t.data.resize(numel);
        std::memcpy(t.data.data(), raw, n);
        ck.model.params.tensors[name] = std::move(t);
    }
    if (!r.done()) throw DataError(path + ": trailing bytes after the last tensor");

    // The stored config must describe exactly the stored tensors.
    const auto shapes = expected_shapes(ck.model.config);
    if (shapes.size() != ck.model.params.tensors.size()) throw DataError(path + ": tensor set does not match config");
    for (const auto& [name, shape] : shapes) {
        const auto* t = ck.model.params.find(name);
        if (!t) throw DataError(path + ": missing tensor " + name);
        if (t->shape != shape) throw DataError(path + ": shape mismatch for tensor " + name);
    }
    return ck;
}

Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected) {
    Checkpoint ck = load_checkpoint(path);
    const auto want = expected_shapes(expected);
    for (const auto& [name, shape] : want) {
        const auto* t = ck.model.params.find(name);
        if (!t) throw DataError(path + ": missing tensor " + name);
        if (t->shape != shape) {
            auto fmt = [](const std::vector<int>& s) {
                std::string o = "[";
                for (std::size_t i = 0; i < s.size(); ++i) o += (i ? "," : "") + std::to_string(s[i]);
                return o + "]";
            };
            throw DataError(path + ": shape mismatch for tensor " + name + ": file has " + fmt(t->shape) +
                            ", config expects " + fmt(shape));
        }
    }
    return ck;
}

}  // namespace vplan
