#include "gdoc/run_config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "gdoc/objectives.hpp"
#include "gdoc/rng.hpp"

namespace gdoc {

namespace {

struct KeySpec {
    const char* key;
    const char* default_value;
};

// Reference-scale values from the original recipe, for the record:
// batch 128, 499600 steps, peak lr 1e-4 warmed over the first 10%, final lr
// 5e-5, weight decay 1e-2, temperature 0.07, queue 65536, 224x224x3 images,
// 256-token sequences, hidden width 768. The desk-scale temperature default
// is higher: without it the mining gradients (scaled 1/tau) drown the
// matching loss, whose logits are raw inner products.
const std::vector<KeySpec>& registry() {
    static const std::vector<KeySpec> keys = {
        // corpus generation
        {"seed", "1"},
        {"classes", "16"},
        {"per_class", "100"},
        {"separability", "1.0"},
        {"image_size", "32"},
        {"channels", "1"},
        {"vocab", "64"},
        {"token_min", "32"},
        {"token_max", "48"},
        {"noise", "0.08"},
        {"train_frac", "0.70"},
        {"val_frac", "0.15"},
        // model
        {"patch_size", "8"},
        {"vision_dim", "64"},
        {"vision_layers", "2"},
        {"vision_heads", "4"},
        {"lang_dim", "64"},
        {"lang_layers", "2"},
        {"lang_heads", "4"},
        {"seq_len", "32"},
        {"ff_mult", "2"},
        {"proj_hidden", "64"},
        {"proj_dim", "32"},
        {"cmae_layers", "2"},
        {"cmae_heads", "4"},
        {"cmae_shared", "true"},
        // pretraining
        {"setting", "S2"},
        {"batch_size", "16"},
        {"total_steps", "2000"},
        {"warmup_fraction", "0.1"},
        {"peak_lr", "0.002"},
        {"final_lr", "0.0002"},
        {"weight_decay", "0.01"},
        {"temperature", "0.3"},
        {"queue_capacity", "512"},
        {"k_mine", "5"},
        {"lambda", "2.0"},
        {"entropy_sign", "1"},
        {"stage2_start_step", "1000"},
        {"checkpoint_interval", "1000"},
        {"deterministic", "true"},
        {"grad_clip", "5.0"},
        {"nn_in_denominator", "false"},
        {"l2u_targets", "hard"},
        {"freeze_backbones_stage2", "true"},
        {"l2m_source", "proj"},
        {"l2u_source", "cmae"},
        {"l2r_source", "cmae"},
        {"neighbor_refresh_interval", "0"},
        // evaluation
        {"way", "5"},
        {"shot", "1"},
        {"query_per_class", "15"},
        {"episodes", "600"},
        {"base_classes", "9"},
        {"eval_modality", "multimodal"},
        {"retrieval_space", "inference"},
        {"eval_seed", "123"},
        {"meta_episodes", "60"},
        {"meta_lr", "0.0002"},
        {"probe_steps", "300"},
        {"probe_lr", "0.05"},
        {"probe_batch", "64"},
    };
    return keys;
}

}  // namespace

RunConfig::RunConfig() {
    for (const auto& spec : registry()) values_[spec.key] = spec.default_value;
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open config file " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        // trim
        auto b = line.find_first_not_of(" \t\r");
        auto e = line.find_last_not_of(" \t\r");
        if (b == std::string::npos) continue;
        line = line.substr(b, e - b + 1);
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(line_no) +
                             ": expected key=value, got '" + line + "'");
        set(line.substr(0, eq), line.substr(eq + 1));
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
    it->second = value;
}

void RunConfig::set_kv(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw UsageError("expected key=value, got '" + assignment + "'");
    set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) != 0; }

const std::string& RunConfig::raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
    return it->second;
}

int RunConfig::get_int(const std::string& key) const {
    try {
        size_t pos = 0;
        int v = std::stoi(raw(key), &pos);
        if (pos != raw(key).size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': '" + raw(key) + "' is not an integer");
    }
}

uint64_t RunConfig::get_u64(const std::string& key) const {
    try {
        return std::stoull(raw(key));
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': '" + raw(key) + "' is not an integer");
    }
}

double RunConfig::get_double(const std::string& key) const {
    try {
        size_t pos = 0;
        double v = std::stod(raw(key), &pos);
        if (pos != raw(key).size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': '" + raw(key) + "' is not a number");
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = raw(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw UsageError("config key '" + key + "': '" + v + "' is not a boolean");
}

const std::string& RunConfig::get_string(const std::string& key) const { return raw(key); }

std::string RunConfig::resolved_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
    return os.str();
}

uint64_t RunConfig::digest() const {
    std::string text = resolved_text();
    return fnv1a(text.data(), text.size());
}

void RunConfig::echo_to(const std::string& out_dir, const std::string& command) const {
    std::filesystem::create_directories(out_dir);
    std::ofstream f(out_dir + "/config.resolved.cfg", std::ios::trunc);
    if (!f) throw DataError("cannot write resolved config into " + out_dir);
    f << "# command: " << command << "\n";
    f << resolved_text();
}

void RunConfig::sync_with_manifest(const CorpusManifest& m) {
    auto set_num = [&](const char* key, auto v) {
        std::ostringstream os;
        os << v;
        values_[key] = os.str();
    };
    set_num("classes", m.params.num_categories);
    set_num("per_class", m.params.per_class);
    set_num("separability", m.params.separability);
    set_num("image_size", m.params.image_height);
    set_num("channels", m.params.channels);
    set_num("vocab", m.params.vocab_size);
    set_num("token_min", m.params.token_len_min);
    set_num("token_max", m.params.token_len_max);
    set_num("noise", m.params.noise);
    set_num("train_frac", m.params.train_frac);
    set_num("val_frac", m.params.val_frac);
}

DatagenParams RunConfig::datagen_params() const {
    DatagenParams p;
    p.seed = get_u64("seed");
    p.num_categories = get_int("classes");
    p.per_class = get_int("per_class");
    p.separability = static_cast<float>(get_double("separability"));
    p.image_height = get_int("image_size");
    p.image_width = get_int("image_size");
    p.channels = get_int("channels");
    p.vocab_size = get_int("vocab");
    p.token_len_min = get_int("token_min");
    p.token_len_max = get_int("token_max");
    p.noise = static_cast<float>(get_double("noise"));
    p.train_frac = static_cast<float>(get_double("train_frac"));
    p.val_frac = static_cast<float>(get_double("val_frac"));
    p.validate();
    return p;
}

ModelConfig RunConfig::model_config(const std::string& setting_override) const {
    Setting setting = setting_from_string(
        setting_override.empty() ? get_string("setting") : setting_override);
    ModelConfig cfg;
    cfg.vision.image_height = get_int("image_size");
    cfg.vision.image_width = get_int("image_size");
    cfg.vision.channels = get_int("channels");
    cfg.vision.patch_size = get_int("patch_size");
    cfg.vision.hidden_dim = get_int("vision_dim");
    cfg.vision.num_layers = get_int("vision_layers");
    cfg.vision.num_heads = get_int("vision_heads");
    cfg.vision.ff_mult = get_int("ff_mult");
    cfg.language.vocab_size = get_int("vocab");
    cfg.language.max_sequence_length = get_int("seq_len");
    cfg.language.hidden_dim = get_int("lang_dim");
    cfg.language.num_layers = get_int("lang_layers");
    cfg.language.num_heads = get_int("lang_heads");
    cfg.language.ff_mult = get_int("ff_mult");
    cfg.projection.hidden_dim = get_int("proj_hidden");
    cfg.projection.output_dim = get_int("proj_dim");
    cfg.cmae.hidden_dim = get_int("vision_dim");
    cfg.cmae.num_heads = get_int("cmae_heads");
    cfg.cmae.num_layers = get_int("cmae_layers");
    cfg.cmae.ff_mult = get_int("ff_mult");
    cfg.cmae.shared_parameters = get_bool("cmae_shared");
    cfg.with_cmae = setting != Setting::S1;
    cfg.with_cluster_heads = setting == Setting::S3;
    cfg.num_clusters_vision = get_int("classes");
    cfg.num_clusters_language = get_int("classes");
    cfg.init_seed = get_u64("seed");
    cfg.validate();
    return cfg;
}

}  // namespace gdoc
