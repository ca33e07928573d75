#pragma once

#include <map>
#include <string>
#include <vector>

#include "gdoc/datagen.hpp"
#include "gdoc/model_config.hpp"

namespace gdoc {

// Flat key=value configuration: one key per line, '#' comments. Defaults are
// overridden by a config file, which is overridden by command-line settings.
// Unknown keys are rejected. The fully resolved config is echoed into every
// output directory for provenance.
class RunConfig {
  public:
    RunConfig();

    void load_file(const std::string& path);
    void set(const std::string& key, const std::string& value);  // UsageError on unknown key
    void set_kv(const std::string& assignment);                  // "key=value"

    bool has(const std::string& key) const;
    const std::string& raw(const std::string& key) const;
    int get_int(const std::string& key) const;
    uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    const std::string& get_string(const std::string& key) const;

    // canonical serialization (sorted keys) and its digest
    std::string resolved_text() const;
    uint64_t digest() const;
    void echo_to(const std::string& out_dir, const std::string& command) const;

    // keep the model-side keys consistent with an existing corpus
    void sync_with_manifest(const CorpusManifest& manifest);

    DatagenParams datagen_params() const;
    ModelConfig model_config(const std::string& setting_override = "") const;

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace gdoc
