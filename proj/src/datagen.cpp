#include "gdoc/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gdoc/rng.hpp"

namespace gdoc {

namespace {

constexpr int kNumSpecialTokens = 4;  // pad, cls, sep, unused

// Per-class motif parameters, a pure function of (seed, category).
struct Motif {
    int kind;  // 0 bands, 1 checker, 2 blobs
    float fx, fy, phase;
    int cell;
    float cx[3], cy[3];
};

Motif class_motif(uint64_t seed, int category) {
    Rng rng(seed ^ (0x51ed2701afe83901ULL * static_cast<uint64_t>(category + 1)));
    Motif m;
    m.kind = category % 3;
    m.fx = 1.0f + static_cast<float>(rng.below(3));
    m.fy = 1.0f + static_cast<float>(rng.below(3));
    if (rng.below(2) == 0) m.fy = 0.0f;
    m.phase = rng.uniform_float() * 6.2831853f;
    m.cell = 2 + 2 * static_cast<int>(rng.below(3));
    for (int i = 0; i < 3; ++i) {
        m.cx[i] = rng.uniform_float();
        m.cy[i] = rng.uniform_float();
    }
    return m;
}

float motif_value(const Motif& m, float u, float v) {
    switch (m.kind) {
        case 0:
            return 0.5f + 0.5f * std::sin(6.2831853f * (m.fx * u + m.fy * v) + m.phase);
        case 1: {
            int qx = static_cast<int>(u * 8.0f) / (m.cell / 2 + 1);
            int qy = static_cast<int>(v * 8.0f) / (m.cell / 2 + 1);
            return static_cast<float>((qx + qy) % 2);
        }
        default: {
            float acc = 0.0f;
            for (int i = 0; i < 3; ++i) {
                float dx = u - m.cx[i];
                float dy = v - m.cy[i];
                acc += std::exp(-(dx * dx + dy * dy) / 0.02f);
            }
            return std::min(1.0f, acc);
        }
    }
}

struct TokenPools {
    int shared_begin, shared_count;
    int segment_size;

    static TokenPools from(const DatagenParams& p) {
        TokenPools t;
        int usable = p.vocab_size - kNumSpecialTokens;
        t.shared_begin = kNumSpecialTokens;
        t.shared_count = usable / 2;
        t.segment_size = (usable - t.shared_count) / p.num_categories;
        return t;
    }
    int segment_begin(int category) const {
        return shared_begin + shared_count + category * segment_size;
    }
};

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

uint64_t parse_hex64(const std::string& s) {
    return std::stoull(s, nullptr, 16);
}

void put_u32(std::string& out, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.append(b, 4);
}

void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

class ByteReader {
  public:
    ByteReader(const std::string& bytes, const std::string& what)
        : bytes_(bytes), what_(what) {}

    uint32_t u32() {
        if (pos_ + 4 > bytes_.size()) throw DataError(what_ + ": truncated record");
        uint32_t v = 0;
        for (int i = 3; i >= 0; --i)
            v = (v << 8) | static_cast<unsigned char>(bytes_[pos_ + static_cast<size_t>(i)]);
        pos_ += 4;
        return v;
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    bool done() const { return pos_ == bytes_.size(); }

  private:
    const std::string& bytes_;
    std::string what_;
    size_t pos_ = 0;
};

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open " + path + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("write failed for " + path);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string split_name_of(int index_in_class, const DatagenParams& p) {
    int train_end = static_cast<int>(std::lround(p.train_frac * p.per_class));
    int val_end = train_end + static_cast<int>(std::lround(p.val_frac * p.per_class));
    if (index_in_class < train_end) return "train";
    if (index_in_class < val_end) return "val";
    return "test";
}

}  // namespace

void DatagenParams::validate() const {
    if (per_class < 1) throw DataError("datagen: per_class must be at least 1");
    if (num_categories < 1) throw DataError("datagen: need at least one category");
    if (separability < 0.0f || separability > 1.0f)
        throw DataError("datagen: separability must lie in [0,1]");
    if (token_len_min < 1 || token_len_max < token_len_min)
        throw DataError("datagen: bad token length range");
    if (train_frac + val_frac >= 1.0f)
        throw DataError("datagen: train_frac + val_frac must leave room for a test split");
    TokenPools pools = TokenPools::from(*this);
    if (pools.segment_size < 1)
        throw DataError("datagen: vocabulary of " + std::to_string(vocab_size) +
                        " too small for " + std::to_string(num_categories) +
                        " category segments");
}

DocumentPair synthesize_document(const DatagenParams& p, int category, int ordinal) {
    Motif motif = class_motif(p.seed, category);
    Motif base = class_motif(p.seed, -1);  // shared across classes
    TokenPools pools = TokenPools::from(p);
    Rng rng(p.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(ordinal + 7)));

    DocumentPair doc;
    doc.height = p.image_height;
    doc.width = p.image_width;
    doc.channels = p.channels;
    doc.label = category;
    doc.image.resize(static_cast<size_t>(p.image_height) * p.image_width * p.channels);
    float s = p.separability;
    for (int y = 0; y < p.image_height; ++y)
        for (int x = 0; x < p.image_width; ++x) {
            float u = static_cast<float>(x) / static_cast<float>(p.image_width);
            float v = static_cast<float>(y) / static_cast<float>(p.image_height);
            float value = (1.0f - s) * motif_value(base, u, v) + s * motif_value(motif, u, v);
            for (int c = 0; c < p.channels; ++c) {
                float n = p.noise * (rng.uniform_float() - 0.5f);
                float px = std::min(1.0f, std::max(0.0f, value + n));
                doc.image[(static_cast<size_t>(y) * p.image_width + x) * p.channels +
                          static_cast<size_t>(c)] = px;
            }
        }

    int len = p.token_len_min +
              static_cast<int>(rng.below(static_cast<uint64_t>(p.token_len_max - p.token_len_min + 1)));
    doc.tokens.reserve(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) {
        bool from_class_segment = rng.uniform_float() < s;
        int id = from_class_segment
                     ? pools.segment_begin(category) + static_cast<int>(rng.below(
                           static_cast<uint64_t>(pools.segment_size)))
                     : pools.shared_begin + static_cast<int>(rng.below(
                           static_cast<uint64_t>(pools.shared_count)));
        doc.tokens.push_back(id);
    }
    return doc;
}

CorpusManifest generate_corpus(const DatagenParams& params, const std::string& out_dir) {
    params.validate();
    std::filesystem::create_directories(out_dir);

    struct SplitBuffers {
        std::string images, tokens, labels;
        uint32_t count = 0;
    };
    std::vector<std::string> split_order = {"train", "val", "test"};
    std::vector<SplitBuffers> buffers(3);
    auto split_index = [&](const std::string& name) {
        for (size_t i = 0; i < split_order.size(); ++i)
            if (split_order[i] == name) return i;
        throw DataError("unknown split " + name);
    };

    int ordinal = 0;
    for (int c = 0; c < params.num_categories; ++c) {
        for (int i = 0; i < params.per_class; ++i, ++ordinal) {
            DocumentPair doc = synthesize_document(params, c, ordinal);
            SplitBuffers& sb = buffers[split_index(split_name_of(i, params))];
            put_u32(sb.images, static_cast<uint32_t>(doc.height));
            put_u32(sb.images, static_cast<uint32_t>(doc.width));
            put_u32(sb.images, static_cast<uint32_t>(doc.channels));
            for (float px : doc.image) put_f32(sb.images, px);
            put_u32(sb.tokens, static_cast<uint32_t>(doc.tokens.size()));
            for (int t : doc.tokens) put_u32(sb.tokens, static_cast<uint32_t>(t));
            put_u32(sb.labels, static_cast<uint32_t>(doc.label));
            sb.count++;
        }
    }

    CorpusManifest manifest;
    manifest.params = params;
    std::ostringstream text;
    text << "format_version=1\n"
         << "generator_version=1\n"
         << "prng=splitmix64\n"
         << "seed=" << params.seed << "\n"
         << "num_categories=" << params.num_categories << "\n"
         << "per_class=" << params.per_class << "\n"
         << "separability=" << params.separability << "\n"
         << "image_height=" << params.image_height << "\n"
         << "image_width=" << params.image_width << "\n"
         << "channels=" << params.channels << "\n"
         << "vocab_size=" << params.vocab_size << "\n"
         << "token_len_min=" << params.token_len_min << "\n"
         << "token_len_max=" << params.token_len_max << "\n"
         << "noise=" << params.noise << "\n"
         << "train_frac=" << params.train_frac << "\n"
         << "val_frac=" << params.val_frac << "\n";
    for (size_t i = 0; i < split_order.size(); ++i) {
        const std::string& name = split_order[i];
        SplitBuffers& sb = buffers[i];
        SplitInfo info;
        info.name = name;
        info.count = sb.count;
        info.images_digest = fnv1a(sb.images.data(), sb.images.size());
        info.tokens_digest = fnv1a(sb.tokens.data(), sb.tokens.size());
        info.labels_digest = fnv1a(sb.labels.data(), sb.labels.size());
        manifest.splits.push_back(info);
        write_file(out_dir + "/" + name + ".images.bin", sb.images);
        write_file(out_dir + "/" + name + ".tokens.bin", sb.tokens);
        write_file(out_dir + "/" + name + ".labels.bin", sb.labels);
        text << "split." << name << ".count=" << sb.count << "\n"
             << "split." << name << ".images_digest=" << hex64(info.images_digest) << "\n"
             << "split." << name << ".tokens_digest=" << hex64(info.tokens_digest) << "\n"
             << "split." << name << ".labels_digest=" << hex64(info.labels_digest) << "\n";
    }
    write_file(out_dir + "/manifest", text.str());
    return manifest;
}

const SplitInfo& CorpusManifest::split(const std::string& name) const {
    for (const auto& s : splits)
        if (s.name == name) return s;
    throw DataError("corpus has no split named '" + name + "'");
}

CorpusManifest read_manifest(const std::string& dir) {
    std::string text = read_file(dir + "/manifest");
    CorpusManifest m;
    std::istringstream ss(text);
    std::string line;
    auto get_split = [&](const std::string& name) -> SplitInfo& {
        for (auto& s : m.splits)
            if (s.name == name) return s;
        m.splits.push_back(SplitInfo{name, 0, 0, 0, 0});
        return m.splits.back();
    };
    while (std::getline(ss, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("manifest: malformed line '" + line + "'");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        if (key == "format_version") m.format_version = std::stoi(value);
        else if (key == "generator_version") m.generator_version = std::stoi(value);
        else if (key == "prng") { /* informational */ }
        else if (key == "seed") m.params.seed = std::stoull(value);
        else if (key == "num_categories") m.params.num_categories = std::stoi(value);
        else if (key == "per_class") m.params.per_class = std::stoi(value);
        else if (key == "separability") m.params.separability = std::stof(value);
        else if (key == "image_height") m.params.image_height = std::stoi(value);
        else if (key == "image_width") m.params.image_width = std::stoi(value);
        else if (key == "channels") m.params.channels = std::stoi(value);
        else if (key == "vocab_size") m.params.vocab_size = std::stoi(value);
        else if (key == "token_len_min") m.params.token_len_min = std::stoi(value);
        else if (key == "token_len_max") m.params.token_len_max = std::stoi(value);
        else if (key == "noise") m.params.noise = std::stof(value);
        else if (key == "train_frac") m.params.train_frac = std::stof(value);
        else if (key == "val_frac") m.params.val_frac = std::stof(value);
        else if (key.rfind("split.", 0) == 0) {
            auto dot = key.find('.', 6);
            if (dot == std::string::npos) throw DataError("manifest: bad split key " + key);
            SplitInfo& s = get_split(key.substr(6, dot - 6));
            std::string field = key.substr(dot + 1);
            if (field == "count") s.count = static_cast<uint32_t>(std::stoul(value));
            else if (field == "images_digest") s.images_digest = parse_hex64(value);
            else if (field == "tokens_digest") s.tokens_digest = parse_hex64(value);
            else if (field == "labels_digest") s.labels_digest = parse_hex64(value);
            else throw DataError("manifest: unknown split field " + field);
        } else {
            throw DataError("manifest: unknown key " + key);
        }
    }
    return m;
}

std::vector<DocumentPair> load_corpus(const std::string& dir, const std::string& split) {
    CorpusManifest manifest = read_manifest(dir);
    const SplitInfo& info = manifest.split(split);

    std::string images = read_file(dir + "/" + split + ".images.bin");
    std::string tokens = read_file(dir + "/" + split + ".tokens.bin");
    std::string labels = read_file(dir + "/" + split + ".labels.bin");
    if (fnv1a(images.data(), images.size()) != info.images_digest)
        throw DataError("corpus " + split + ".images.bin fails its manifest digest");
    if (fnv1a(tokens.data(), tokens.size()) != info.tokens_digest)
        throw DataError("corpus " + split + ".tokens.bin fails its manifest digest");
    if (fnv1a(labels.data(), labels.size()) != info.labels_digest)
        throw DataError("corpus " + split + ".labels.bin fails its manifest digest");

    ByteReader ir(images, split + ".images.bin");
    ByteReader tr(tokens, split + ".tokens.bin");
    ByteReader lr(labels, split + ".labels.bin");
    std::vector<DocumentPair> out;
    out.reserve(info.count);
    for (uint32_t i = 0; i < info.count; ++i) {
        DocumentPair doc;
        doc.height = static_cast<int>(ir.u32());
        doc.width = static_cast<int>(ir.u32());
        doc.channels = static_cast<int>(ir.u32());
        size_t n = static_cast<size_t>(doc.height) * doc.width * doc.channels;
        doc.image.resize(n);
        for (size_t k = 0; k < n; ++k) doc.image[k] = ir.f32();
        uint32_t len = tr.u32();
        doc.tokens.resize(len);
        for (uint32_t k = 0; k < len; ++k) doc.tokens[k] = static_cast<int>(tr.u32());
        doc.label = static_cast<int>(lr.u32());
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "%s:%06u", split.c_str(), i);
        doc.doc_id = idbuf;
        out.push_back(std::move(doc));
    }
    if (!ir.done() || !tr.done() || !lr.done())
        throw DataError("corpus " + split + ": trailing bytes beyond manifest count");
    return out;
}

}  // namespace gdoc
