// Tensor container format, dataset loading, and the synthetic co-occurrence
// scene generator used as the desk-scale stand-in for full scene datasets.
//
// Container layout (all integers little-endian):
//   magic "OTSF", version u32 = 1, record count u32, then per record:
//   name length u16, name bytes, dtype u8 (f64=1, f32=2, u8=3), rank u32,
//   dims u32 x rank, payload (row-major scalars).
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ots/matrix.hpp"
#include "ots/ofam.hpp"
#include "ots/rng.hpp"

namespace ots {

enum class Dtype : std::uint8_t { F64 = 1, F32 = 2, U8 = 3 };

inline std::size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::F64: return 8;
        case Dtype::F32: return 4;
        case Dtype::U8: return 1;
    }
    throw FormatError("unknown dtype code " + std::to_string(static_cast<int>(d)));
}

struct TensorRecord {
    std::string name;
    Dtype dtype = Dtype::F64;
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> payload;

    std::uint64_t element_count() const {
        std::uint64_t n = 1;
        for (std::uint32_t d : dims) n *= d;
        return n;
    }

    static TensorRecord from_matrix(std::string name, const Matrix& m) {
        TensorRecord r;
        r.name = std::move(name);
        r.dtype = Dtype::F64;
        r.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
        r.payload.resize(static_cast<std::size_t>(m.size()) * 8);
        std::memcpy(r.payload.data(), m.data(), r.payload.size());
        return r;
    }

    static TensorRecord from_bytes(std::string name, const std::vector<std::uint8_t>& bytes) {
        TensorRecord r;
        r.name = std::move(name);
        r.dtype = Dtype::U8;
        r.dims = {static_cast<std::uint32_t>(bytes.size())};
        r.payload = bytes;
        return r;
    }

    static TensorRecord from_scalar(std::string name, double v) {
        return from_matrix(std::move(name), Matrix::constant(1, 1, v));
    }

    // f64 or f32 (widened); rank 1 becomes a column vector.
    Matrix to_matrix() const {
        if (dtype == Dtype::U8) {
            throw FormatError("record '" + name + "' holds bytes, not a float tensor");
        }
        if (dims.empty() || dims.size() > 2) {
            throw FormatError("record '" + name + "' has rank " + std::to_string(dims.size()) +
                              ", expected 1 or 2");
        }
        const index_t rows = static_cast<index_t>(dims[0]);
        const index_t cols = dims.size() == 2 ? static_cast<index_t>(dims[1]) : 1;
        Matrix m(rows, cols);
        if (dtype == Dtype::F64) {
            std::memcpy(m.data(), payload.data(), payload.size());
        } else {
            for (index_t i = 0; i < m.size(); ++i) {
                float f;
                std::memcpy(&f, payload.data() + static_cast<std::size_t>(i) * 4, 4);
                m.data()[i] = static_cast<double>(f);
            }
        }
        if (!m.all_finite()) {
            throw FormatError("record '" + name + "' contains non-finite values");
        }
        return m;
    }

    double to_scalar() const {
        if (dtype == Dtype::U8) {
            if (payload.size() != 1) {
                throw FormatError("record '" + name + "' is not a scalar");
            }
            return static_cast<double>(payload[0]);
        }
        Matrix m = to_matrix();
        if (m.size() != 1) throw FormatError("record '" + name + "' is not a scalar");
        return m(0, 0);
    }
};

namespace detail {

constexpr char kContainerMagic[4] = {'O', 'T', 'S', 'F'};
constexpr std::uint32_t kContainerVersion = 1;

template <typename T>
void write_le(std::ofstream& out, T v) {
    static_assert(std::is_integral_v<T>);
    std::uint8_t buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        buf[i] = static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i));
    }
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

class Reader {
public:
    Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw FormatError("cannot open '" + path + "'");
    }

    std::uint64_t offset() const { return offset_; }

    void read_exact(void* dst, std::size_t n, const char* what) {
        in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw FormatError("'" + path_ + "': truncated while reading " + std::string(what),
                              offset_);
        }
        offset_ += n;
    }

    template <typename T>
    T read_le(const char* what) {
        std::uint8_t buf[sizeof(T)];
        read_exact(buf, sizeof(T), what);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        return static_cast<T>(v);
    }

    bool at_eof() {
        return in_.peek() == std::char_traits<char>::eof();
    }

private:
    std::ifstream in_;
    std::string path_;
    std::uint64_t offset_ = 0;
};

}  // namespace detail

inline void write_container(const std::string& path, const std::vector<TensorRecord>& records) {
    {
        std::map<std::string, int> seen;
        for (const auto& r : records) {
            if (++seen[r.name] > 1) {
                throw UsageError("write_container: duplicate record name '" + r.name + "'");
            }
            if (r.name.size() > 0xFFFF) throw UsageError("write_container: record name too long");
            if (r.payload.size() != r.element_count() * dtype_size(r.dtype)) {
                throw UsageError("write_container: payload of '" + r.name +
                                 "' does not match its shape");
            }
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    out.write(detail::kContainerMagic, 4);
    detail::write_le<std::uint32_t>(out, detail::kContainerVersion);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        detail::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
        out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        detail::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(r.dtype));
        detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.dims.size()));
        for (std::uint32_t d : r.dims) detail::write_le<std::uint32_t>(out, d);
        out.write(reinterpret_cast<const char*>(r.payload.data()),
                  static_cast<std::streamsize>(r.payload.size()));
    }
    if (!out) throw FormatError("write to '" + path + "' failed");
}

inline std::vector<TensorRecord> read_container(const std::string& path) {
    detail::Reader in(path);
    char magic[4];
    in.read_exact(magic, 4, "magic");
    if (std::memcmp(magic, detail::kContainerMagic, 4) != 0) {
        throw FormatError("'" + path + "': bad magic", 0);
    }
    const auto version = in.read_le<std::uint32_t>("version");
    if (version != detail::kContainerVersion) {
        throw FormatError("'" + path + "': unsupported version " + std::to_string(version), 4);
    }
    const auto count = in.read_le<std::uint32_t>("record count");
    std::vector<TensorRecord> records;
    records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorRecord r;
        const auto name_len = in.read_le<std::uint16_t>("name length");
        r.name.resize(name_len);
        in.read_exact(r.name.data(), name_len, "name");
        const std::uint64_t dtype_at = in.offset();
        const auto dtype = in.read_le<std::uint8_t>("dtype");
        if (dtype < 1 || dtype > 3) {
            throw FormatError("'" + path + "': record '" + r.name + "' has invalid dtype " +
                              std::to_string(dtype), dtype_at);
        }
        r.dtype = static_cast<Dtype>(dtype);
        const auto rank = in.read_le<std::uint32_t>("rank");
        if (rank > 8) {
            throw FormatError("'" + path + "': record '" + r.name + "' has implausible rank " +
                              std::to_string(rank), dtype_at + 1);
        }
        r.dims.resize(rank);
        for (auto& d : r.dims) d = in.read_le<std::uint32_t>("dims");
        const std::uint64_t bytes = r.element_count() * dtype_size(r.dtype);
        r.payload.resize(bytes);
        in.read_exact(r.payload.data(), bytes, ("payload of '" + r.name + "'").c_str());
        records.push_back(std::move(r));
    }
    if (!in.at_eof()) {
        throw FormatError("'" + path + "': trailing bytes after last record", in.offset());
    }
    return records;
}

// ---------------------------------------------------------------------------
// Datasets.

struct Sample {
    ObjectFeatures features;
    int label = 0;
};

struct SceneDataset {
    std::vector<Sample> samples;
    std::vector<std::string> class_names;
    index_t object_count = 0;
    index_t channel_count = 0;

    index_t class_count() const { return static_cast<index_t>(class_names.size()); }

    void validate() const {
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const Sample& s = samples[i];
            if (s.label < 0 || s.label >= class_count()) {
                throw UsageError("dataset sample " + std::to_string(i) + " has label " +
                                 std::to_string(s.label) + " outside " +
                                 std::to_string(class_count()) + " classes");
            }
            if (s.features.matrix.rows() != channel_count ||
                s.features.matrix.cols() != object_count) {
                throw ShapeError("dataset sample " + std::to_string(i) + " has shape " +
                                 s.features.matrix.shape_string() + ", expected " +
                                 Matrix::shape_string(channel_count, object_count));
            }
        }
    }
};

// Class-conditional object presence model. Every class shares the same
// per-object embedding; the only class signal is which objects co-occur.
struct CooccurrenceSpec {
    index_t class_count = 7;
    index_t object_count = 150;
    index_t channel_count = 1024;
    Matrix presence;           // class_count x object_count, entries in [0,1]
    Matrix object_embeddings;  // channel_count x object_count
    double noise_sigma = 0.1;
    std::uint64_t seed = 7;

    void validate() const {
        if (presence.rows() != class_count || presence.cols() != object_count) {
            throw ConfigError("co-occurrence spec: presence shape " + presence.shape_string() +
                              " does not match " + std::to_string(class_count) + " classes x " +
                              std::to_string(object_count) + " objects");
        }
        for (index_t i = 0; i < presence.size(); ++i) {
            const double p = presence.data()[i];
            if (p < 0.0 || p > 1.0) throw ConfigError("co-occurrence spec: presence outside [0,1]");
        }
        for (index_t a = 0; a < class_count; ++a) {
            for (index_t b = a + 1; b < class_count; ++b) {
                bool distinct = false;
                for (index_t j = 0; j < object_count && !distinct; ++j) {
                    distinct = presence(a, j) != presence(b, j);
                }
                if (!distinct) {
                    throw ConfigError("co-occurrence spec: classes " + std::to_string(a) + " and " +
                                      std::to_string(b) + " have identical presence rows");
                }
            }
        }
        if (object_embeddings.rows() != channel_count ||
            object_embeddings.cols() != object_count) {
            throw ConfigError("co-occurrence spec: embedding shape mismatch");
        }
        if (noise_sigma < 0.0) throw ConfigError("co-occurrence spec: negative noise sigma");
    }

    // Presence layout: a common block every class shares, a distinctive
    // block per class, pair objects shared by adjacent classes, and a low
    // background rate elsewhere.
    static Matrix default_presence(index_t classes, index_t objects) {
        Matrix p(classes, objects);
        p.fill(0.02);
        const index_t common = std::min<index_t>(10, objects);
        for (index_t k = 0; k < classes; ++k) {
            for (index_t j = 0; j < common; ++j) p(k, j) = 0.75;
        }
        const index_t per_class = 12;
        for (index_t k = 0; k < classes; ++k) {
            for (index_t d = 0; d < per_class; ++d) {
                const index_t j = common + k * per_class + d;
                if (j < objects) p(k, j) = 0.85;
            }
        }
        const index_t pair_base = common + classes * per_class;
        for (index_t k = 0; k < classes; ++k) {
            for (index_t d = 0; d < 2; ++d) {
                const index_t j = pair_base + k * 2 + d;
                if (j < objects) {
                    p(k, j) = 0.6;
                    p((k + 1) % classes, j) = 0.6;
                }
            }
        }
        return p;
    }

    static CooccurrenceSpec defaults(std::uint64_t sample_seed = 7) {
        CooccurrenceSpec spec;
        spec.seed = sample_seed;
        spec.presence = default_presence(spec.class_count, spec.object_count);
        // one canonical embedding set, independent of the sampling seed
        Rng rng(0x075c3a1eULL);
        const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(spec.channel_count));
        spec.object_embeddings =
            rng.gaussian_matrix(spec.channel_count, spec.object_count, inv_sqrt_c);
        return spec;
    }
};

// Draws a class uniformly, then object presence per class probabilities;
// present columns are the object embedding plus isotropic noise, absent
// columns are zero, mirroring the aggregation module's absence rule.
inline SceneDataset generate_synthetic(const CooccurrenceSpec& spec, index_t n_samples) {
    spec.validate();
    Rng rng(spec.seed);
    SceneDataset ds;
    ds.object_count = spec.object_count;
    ds.channel_count = spec.channel_count;
    for (index_t k = 0; k < spec.class_count; ++k) {
        ds.class_names.push_back("class_" + std::to_string(k));
    }
    ds.samples.reserve(static_cast<std::size_t>(n_samples));
    for (index_t s = 0; s < n_samples; ++s) {
        Sample sample;
        sample.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.class_count)));
        sample.features.matrix = Matrix(spec.channel_count, spec.object_count);
        sample.features.present.assign(static_cast<std::size_t>(spec.object_count), 0);
        for (index_t j = 0; j < spec.object_count; ++j) {
            if (!rng.bernoulli(spec.presence(sample.label, j))) continue;
            sample.features.present[static_cast<std::size_t>(j)] = 1;
            for (index_t c = 0; c < spec.channel_count; ++c) {
                sample.features.matrix(c, j) =
                    spec.object_embeddings(c, j) + spec.noise_sigma * rng.gaussian();
            }
        }
        ds.samples.push_back(std::move(sample));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Offline feature-pair loading ("{i}.F", "{i}.S", "{i}.y" triplets).

struct FeaturePair {
    FeatureMap features;
    ScoreMap scores;
    int label = -1;  // -1 when the container carries no labels
};

inline std::vector<FeaturePair> load_feature_pairs(const std::string& path) {
    std::vector<TensorRecord> records = read_container(path);
    std::map<std::string, const TensorRecord*> by_name;
    index_t max_index = -1;
    for (const auto& r : records) {
        by_name[r.name] = &r;
        const auto dot = r.name.find('.');
        if (dot == std::string::npos) continue;
        try {
            max_index = std::max(max_index, static_cast<index_t>(std::stoll(r.name.substr(0, dot))));
        } catch (const std::exception&) {
            // non-indexed record; ignored
        }
    }
    if (max_index < 0) {
        throw FormatError("'" + path + "': no '{i}.F'/'{i}.S' records found");
    }
    std::vector<FeaturePair> pairs;
    for (index_t i = 0; i <= max_index; ++i) {
        const std::string tag = std::to_string(i);
        auto fit = by_name.find(tag + ".F");
        auto sit = by_name.find(tag + ".S");
        if (fit == by_name.end() || sit == by_name.end()) {
            throw FormatError("'" + path + "': sample " + tag + " is missing its " +
                              (fit == by_name.end() ? "F" : "S") + " record");
        }
        Matrix f = fit->second->to_matrix();
        Matrix s = sit->second->to_matrix();
        if (f.cols() != s.cols()) {
            throw FormatError("'" + path + "': sample " + tag + " has mismatched unit counts, F " +
                              f.shape_string() + " vs S " + s.shape_string());
        }
        int label = -1;
        if (auto yit = by_name.find(tag + ".y"); yit != by_name.end()) {
            label = static_cast<int>(yit->second->to_scalar());
        }
        pairs.push_back(FeaturePair{FeatureMap(std::move(f)), ScoreMap(std::move(s)), label});
    }
    return pairs;
}

}  // namespace ots
