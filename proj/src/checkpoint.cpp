#include "dcr/checkpoint.hpp"

#include "dcr/error.hpp"
#include "dcr/io.hpp"

#include <bit>
#include <cstring>
#include <sstream>

namespace dcr {

namespace {

constexpr char kMagic[4] = {'D', 'C', 'R', '1'};

class Writer {
public:
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        out_.insert(out_.end(), p, p + n);
    }
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str32(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

    const std::uint8_t* take(std::size_t n, const char* what) {
        if (n > in_.size() - pos_) {
            throw FormatError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                              std::to_string(pos_));
        }
        const std::uint8_t* p = in_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::uint8_t u8(const char* what) { return *take(1, what); }
    std::uint32_t u32(const char* what) {
        const auto* p = take(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* what) {
        const auto* p = take(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
        return v;
    }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
    std::string str(std::uint64_t n, const char* what) {
        const auto* p = take(static_cast<std::size_t>(n), what);
        return std::string(reinterpret_cast<const char*>(p), static_cast<std::size_t>(n));
    }
    std::size_t remaining() const { return in_.size() - pos_; }

private:
    const std::vector<std::uint8_t>& in_;
    std::size_t pos_ = 0;
};

NamedArray f64_array(std::string name, const Tensor& t) {
    NamedArray a;
    a.name = std::move(name);
    a.type = ArrayType::f64;
    a.shape = t.shape();
    a.f64.assign(t.data().begin(), t.data().end());
    return a;
}

NamedArray moment_array(std::string name, const Shape& shape, const std::vector<double>& values) {
    NamedArray a;
    a.name = std::move(name);
    a.type = ArrayType::f64;
    a.shape = shape;
    a.f64 = values;
    a.f64.resize(shape_numel(shape), 0.0); // untouched moments are zeros
    return a;
}

void expect(const NamedArray& a, const std::string& name, ArrayType type, const Shape& shape) {
    if (a.name != name) throw FormatError("checkpoint: expected array '" + name + "', found '" + a.name + "'");
    if (a.type != type || a.shape != shape) {
        throw FormatError("checkpoint: array '" + name + "' has shape " + shape_str(a.shape) +
                          ", expected " + shape_str(shape));
    }
}

} // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return &a;
    }
    return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
    Writer w;
    w.bytes(kMagic, 4);
    w.u32(c.version);
    w.u64(c.config_text.size());
    w.bytes(c.config_text.data(), c.config_text.size());
    w.u32(static_cast<std::uint32_t>(c.arrays.size()));
    for (const NamedArray& a : c.arrays) {
        w.str32(a.name);
        w.u8(static_cast<std::uint8_t>(a.type));
        w.u32(static_cast<std::uint32_t>(a.shape.size()));
        for (std::size_t dim : a.shape) w.u64(dim);
        const std::size_t n = shape_numel(a.shape);
        if (a.type == ArrayType::f64) {
            if (a.f64.size() != n) throw DimensionError("checkpoint: array '" + a.name + "' payload size mismatch");
            for (double v : a.f64) w.f64(v);
        } else {
            if (a.u64.size() != n) throw DimensionError("checkpoint: array '" + a.name + "' payload size mismatch");
            for (std::uint64_t v : a.u64) w.u64(v);
        }
    }
    return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (std::memcmp(r.take(4, "magic"), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic");
    Checkpoint c;
    c.version = r.u32("version");
    if (c.version != kCheckpointVersion) {
        throw FormatError("checkpoint format version " + std::to_string(c.version) +
                          " cannot be read; this build reads version " +
                          std::to_string(kCheckpointVersion));
    }
    const std::uint64_t config_len = r.u64("config length");
    c.config_text = r.str(config_len, "config text");
    const std::uint32_t count = r.u32("array count");
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        a.name = r.str(r.u32("name length"), "array name");
        const std::uint8_t type = r.u8("array type");
        if (type > static_cast<std::uint8_t>(ArrayType::u64)) {
            throw FormatError("checkpoint: array '" + a.name + "' has unknown type code " + std::to_string(type));
        }
        a.type = static_cast<ArrayType>(type);
        const std::uint32_t rank = r.u32("array rank");
        std::uint64_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint64_t dim = r.u64("array shape");
            a.shape.push_back(static_cast<std::size_t>(dim));
            // Guard the element count before allocating.
            if (dim != 0 && n > r.remaining() / dim) throw FormatError("checkpoint truncated in array '" + a.name + "'");
            n *= dim;
        }
        if (n > r.remaining() / 8) throw FormatError("checkpoint truncated in array '" + a.name + "'");
        if (a.type == ArrayType::f64) {
            a.f64.resize(static_cast<std::size_t>(n));
            for (double& v : a.f64) v = r.f64("array payload");
        } else {
            a.u64.resize(static_cast<std::size_t>(n));
            for (std::uint64_t& v : a.u64) v = r.u64("array payload");
        }
        c.arrays.push_back(std::move(a));
    }
    if (r.remaining() != 0) {
        throw FormatError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes");
    }
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    const auto bytes = encode_checkpoint(checkpoint);
    write_file(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    return decode_checkpoint(std::vector<std::uint8_t>(text.begin(), text.end()));
}

Checkpoint capture_checkpoint(const Trainer& trainer, const RunConfig& config) {
    Checkpoint c;
    c.config_text = config.to_text();
    const auto& slots = trainer.optimizer().slots();
    for (const ParamSlot& s : slots) c.arrays.push_back(f64_array(s.name, s.tensor));
    for (const ParamSlot& s : slots) {
        c.arrays.push_back(moment_array("adam.m." + s.name, s.tensor.shape(), s.state.m));
        c.arrays.push_back(moment_array("adam.v." + s.name, s.tensor.shape(), s.state.v));
    }
    NamedArray step;
    step.name = "optimizer.step";
    step.type = ArrayType::u64;
    step.shape = {1};
    step.u64 = {trainer.optimizer().steps()};
    c.arrays.push_back(std::move(step));
    return c;
}

void restore_checkpoint(Trainer& trainer, const RunConfig& config, const Checkpoint& c) {
    if (c.config_text != config.to_text()) {
        throw ConfigError("checkpoint config (hash " + fnv1a_hex(c.config_text) +
                          ") does not match the requested config (hash " + config.hash() + ")");
    }
    auto& slots = trainer.optimizer().slots();
    const std::size_t expected = 3 * slots.size() + 1;
    if (c.arrays.size() != expected) {
        throw FormatError("checkpoint holds " + std::to_string(c.arrays.size()) + " arrays, expected " +
                          std::to_string(expected));
    }
    // Validate everything before touching the trainer.
    const std::size_t n = slots.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Shape& shape = slots[i].tensor.shape();
        expect(c.arrays[i], slots[i].name, ArrayType::f64, shape);
        expect(c.arrays[n + 2 * i], "adam.m." + slots[i].name, ArrayType::f64, shape);
        expect(c.arrays[n + 2 * i + 1], "adam.v." + slots[i].name, ArrayType::f64, shape);
    }
    expect(c.arrays.back(), "optimizer.step", ArrayType::u64, {1});

    for (std::size_t i = 0; i < n; ++i) {
        auto dst = slots[i].tensor.mutable_data();
        std::copy(c.arrays[i].f64.begin(), c.arrays[i].f64.end(), dst.begin());
        slots[i].state.m = c.arrays[n + 2 * i].f64;
        slots[i].state.v = c.arrays[n + 2 * i + 1].f64;
    }
    trainer.optimizer().set_steps(c.arrays.back().u64[0]);
}

std::string checkpoint_manifest(const Checkpoint& c) {
    std::ostringstream out;
    out << "format_version " << c.version << "\n"
        << "config_hash " << fnv1a_hex(c.config_text) << "\n"
        << "arrays " << c.arrays.size() << "\n";
    for (const NamedArray& a : c.arrays) {
        out << a.name << ' ' << (a.type == ArrayType::f64 ? "f64" : "u64") << ' ' << shape_str(a.shape);
        if (a.type == ArrayType::u64 && a.u64.size() == 1) out << " = " << a.u64[0];
        out << '\n';
    }
    return out.str();
}

} // namespace dcr
