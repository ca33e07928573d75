// gdoc: corpus generation, self-supervised pretraining, and document-level
// evaluation (few-shot classification, content-based retrieval) in one binary.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "gdoc/datagen.hpp"
#include "gdoc/evaluation.hpp"
#include "gdoc/gradcert.hpp"
#include "gdoc/run_config.hpp"
#include "gdoc/trainer.hpp"

using namespace gdoc;

namespace {

struct CommonOpts {
    std::string config_file;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_file, "flat key=value config file");
    cmd->add_option("--set", opts.sets, "override a config key, key=value (repeatable)");
}

RunConfig resolve_config(const CommonOpts& opts) {
    RunConfig cfg;
    if (!opts.config_file.empty()) cfg.load_file(opts.config_file);
    for (const auto& kv : opts.sets) cfg.set_kv(kv);
    return cfg;
}

// dedicated flags write straight into config keys after --set
struct KeyFlag {
    std::string key;
    std::string value;
    bool seen = false;
};

void bind_key_flag(CLI::App* cmd, std::vector<std::shared_ptr<KeyFlag>>& flags,
                   const std::string& flag, const std::string& key, const std::string& desc) {
    auto kf = std::make_shared<KeyFlag>();
    kf->key = key;
    flags.push_back(kf);
    cmd->add_option_function<std::string>(
        flag,
        [kf](const std::string& v) {
            kf->value = v;
            kf->seen = true;
        },
        desc);
}

void apply_key_flags(RunConfig& cfg, const std::vector<std::shared_ptr<KeyFlag>>& flags) {
    for (const auto& kf : flags)
        if (kf->seen) cfg.set(kf->key, kf->value);
}

std::vector<int> class_range(int from, int to) {
    std::vector<int> out;
    for (int c = from; c < to; ++c) out.push_back(c);
    return out;
}

EmbeddingSpace space_from_config(const RunConfig& cfg) {
    const std::string& v = cfg.get_string("retrieval_space");
    if (v == "inference") return EmbeddingSpace::Inference;
    if (v == "projection") return EmbeddingSpace::Projection;
    throw UsageError("retrieval_space must be inference or projection, got '" + v + "'");
}

Modality modality_from_string(const std::string& s) {
    if (s == "vision") return Modality::Vision;
    if (s == "language") return Modality::Language;
    if (s == "multimodal") return Modality::Multimodal;
    throw UsageError("unknown modality '" + s + "' (vision, language or multimodal)");
}

// shared by the eval subcommands: rebuild the model a checkpoint was trained
// under and load its weights
Model<float> load_model(RunConfig& cfg, const std::string& corpus_dir,
                        const std::string& checkpoint_path, bool random_init) {
    CorpusManifest manifest = read_manifest(corpus_dir);
    cfg.sync_with_manifest(manifest);
    Model<float> model(cfg.model_config());
    if (!random_init) {
        CheckpointFile file = read_checkpoint(checkpoint_path);
        if (file.config_digest != cfg.digest())
            throw DataError(
                "checkpoint config digest does not match the resolved config; pass the "
                "config.resolved.cfg written by the training run");
        load_param_blocks(file, model.params());
    }
    return model;
}

int run_gen_corpus(const RunConfig& cfg, const std::string& out) {
    DatagenParams params = cfg.datagen_params();
    CorpusManifest manifest = generate_corpus(params, out);
    cfg.echo_to(out, "gen-corpus");
    std::printf("corpus written to %s (", out.c_str());
    for (size_t i = 0; i < manifest.splits.size(); ++i)
        std::printf("%s%s=%u", i ? ", " : "", manifest.splits[i].name.c_str(),
                    manifest.splits[i].count);
    std::printf(")\n");
    return 0;
}

int run_pretrain(RunConfig cfg, const std::string& corpus, const std::string& out,
                 const std::string& resume) {
    Trainer trainer(cfg, corpus, out);
    // echo the manifest-synced config actually used
    RunConfig synced = cfg;
    synced.sync_with_manifest(read_manifest(corpus));
    synced.echo_to(out, "pretrain");
    if (!resume.empty()) trainer.resume_from(resume);
    TrainResult result = trainer.run();
    if (!result.history.empty()) {
        const auto& last = result.history.back();
        std::printf("%s\n", format_metrics(last).c_str());
    }
    std::printf("checkpoint: %s\nmetrics: %s\n", result.checkpoint_path.c_str(),
                result.metrics_path.c_str());
    return 0;
}

int run_eval_fewshot(RunConfig cfg, const std::vector<std::shared_ptr<KeyFlag>>& flags,
                     const std::string& corpus, const std::string& checkpoint,
                     const std::string& out, const std::string& split, bool random_init,
                     bool meta_train) {
    // digest check against the training config happens before evaluation keys
    // are overridden
    Model<float> model = load_model(cfg, corpus, checkpoint, random_init);
    apply_key_flags(cfg, flags);
    cfg.echo_to(out, "eval-fewshot");
    int base_classes = cfg.get_int("base_classes");
    int classes = cfg.get_int("classes");
    if (base_classes >= classes)
        throw DataError("base_classes=" + std::to_string(base_classes) +
                        " leaves no novel classes out of " + std::to_string(classes));
    EpisodeSpec spec{cfg.get_int("way"), cfg.get_int("shot"), cfg.get_int("query_per_class")};
    int episodes = cfg.get_int("episodes");
    uint64_t eval_seed = cfg.get_u64("eval_seed");
    int threads = worker_count();

    if (meta_train) {
        auto base_docs = load_corpus(corpus, "train");
        MetaConfig mc;
        mc.spec = spec;
        mc.episodes = cfg.get_int("meta_episodes");
        mc.lr = cfg.get_double("meta_lr");
        mc.seed = eval_seed + 1;
        mc.modality = modality_from_string(cfg.get_string("eval_modality"));
        meta_finetune(model, base_docs, class_range(0, base_classes), mc);
    }

    auto docs = load_corpus(corpus, split);
    auto novel = class_range(base_classes, classes);
    std::ofstream report(out + "/fewshot.txt", std::ios::trunc);
    for (Modality m : {Modality::Vision, Modality::Language, Modality::Multimodal}) {
        FewshotReport r = run_fewshot_eval(model, docs, novel, spec, episodes, eval_seed, m,
                                           threads);
        std::string line = format_fewshot(r);
        report << line << "\n";
        std::printf("%s\n", line.c_str());
    }
    return 0;
}

int run_eval_retrieval(RunConfig cfg, const std::string& corpus, const std::string& checkpoint,
                       const std::string& out, const std::string& split, bool random_init) {
    Model<float> model = load_model(cfg, corpus, checkpoint, random_init);
    cfg.echo_to(out, "eval-retrieval");
    auto docs = load_corpus(corpus, split);
    RetrievalTable table =
        eval_retrieval(model, docs, {1, 5, 10}, worker_count(), space_from_config(cfg));
    std::ofstream report(out + "/retrieval.txt", std::ios::trunc);
    report << table.to_text();
    std::printf("%s", table.to_text().c_str());
    return 0;
}

int run_linear_probe(RunConfig cfg, const std::vector<std::shared_ptr<KeyFlag>>& flags,
                     const std::string& corpus, const std::string& checkpoint,
                     const std::string& out, bool random_init) {
    Model<float> model = load_model(cfg, corpus, checkpoint, random_init);
    apply_key_flags(cfg, flags);
    cfg.echo_to(out, "linear-probe");
    Modality modality = modality_from_string(cfg.get_string("eval_modality"));
    int threads = worker_count();
    auto train_docs = load_corpus(corpus, "train");
    auto test_docs = load_corpus(corpus, "test");
    auto train_emb =
        embed_corpus(model, train_docs, model.config().with_cmae, /*want_uni=*/true, threads);
    auto test_emb =
        embed_corpus(model, test_docs, model.config().with_cmae, /*want_uni=*/true, threads);
    ProbeConfig pc;
    pc.steps = cfg.get_int("probe_steps");
    pc.lr = cfg.get_double("probe_lr");
    pc.batch = cfg.get_int("probe_batch");
    pc.seed = cfg.get_u64("eval_seed");
    double acc = linear_probe(modality_view(train_emb, modality), train_emb.labels,
                              modality_view(test_emb, modality), test_emb.labels,
                              cfg.get_int("classes"), pc);
    std::ofstream report(out + "/linear_probe.txt", std::ios::trunc);
    char buf[128];
    std::snprintf(buf, sizeof(buf), "modality=%s accuracy=%.6f",
                  cfg.get_string("eval_modality").c_str(), acc);
    report << buf << "\n";
    std::printf("%s\n", buf);
    return 0;
}

int run_export(RunConfig cfg, const std::string& corpus, const std::string& checkpoint,
               const std::string& out, const std::string& split, const std::string& modality) {
    Model<float> model = load_model(cfg, corpus, checkpoint, false);
    cfg.echo_to(out, "export-embeddings");
    auto docs = load_corpus(corpus, split);
    RetrievalIndex index = build_index(model, docs, modality_from_string(modality),
                                       worker_count(), space_from_config(cfg));
    std::string path = out + "/embeddings_" + modality + "_" + split + ".gemb";
    write_embedding_file(path, index);
    std::printf("wrote %zu embeddings (dim %zu) to %s\n", index.embeddings.size(),
                index.embeddings.empty() ? 0 : index.embeddings[0].size(), path.c_str());
    return 0;
}

int run_gradcheck(const std::string& setting, int dim) {
    GradcertReport report = run_gradient_certification(setting_from_string(setting), dim);
    for (const auto& c : report.checks)
        std::printf("[%s] %-36s max_rel_err=%.3e tol=%.0e\n", c.pass ? "PASS" : "FAIL",
                    c.name.c_str(), c.max_rel_err, c.tolerance);
    std::printf("gradient certification %s in %.2fs\n",
                report.all_pass() ? "passed" : "FAILED", report.seconds);
    if (!report.all_pass()) throw NumericError("gradient certification failed");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-modal document representation learning, desk scale"};
    app.require_subcommand(1);

    CommonOpts gen_opts;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen-corpus", "synthesize a paired image/text corpus");
    add_common(gen, gen_opts);
    std::vector<std::shared_ptr<KeyFlag>> gen_flags;
    gen->add_option("--out", gen_out, "output corpus directory")->required();
    bind_key_flag(gen, gen_flags, "--seed", "seed", "generator seed");
    bind_key_flag(gen, gen_flags, "--classes", "classes", "number of categories");
    bind_key_flag(gen, gen_flags, "--per-class", "per_class", "documents per category");
    bind_key_flag(gen, gen_flags, "--separability", "separability", "class separability in [0,1]");
    bind_key_flag(gen, gen_flags, "--image-size", "image_size", "square image side");
    bind_key_flag(gen, gen_flags, "--vocab", "vocab", "vocabulary size");

    CommonOpts pre_opts;
    std::string pre_corpus, pre_out, pre_resume;
    auto* pre = app.add_subcommand("pretrain", "two-stage self-supervised pretraining");
    add_common(pre, pre_opts);
    std::vector<std::shared_ptr<KeyFlag>> pre_flags;
    pre->add_option("--corpus", pre_corpus, "corpus directory")->required();
    pre->add_option("--out", pre_out, "run output directory")->required();
    pre->add_option("--resume", pre_resume, "checkpoint to resume from");
    bind_key_flag(pre, pre_flags, "--setting", "setting", "S1, S2 or S3");
    bind_key_flag(pre, pre_flags, "--batch-size", "batch_size", "mini-batch size");
    bind_key_flag(pre, pre_flags, "--total-steps", "total_steps", "training steps");
    bind_key_flag(pre, pre_flags, "--warmup-fraction", "warmup_fraction", "warmup fraction");
    bind_key_flag(pre, pre_flags, "--peak-lr", "peak_lr", "peak learning rate");
    bind_key_flag(pre, pre_flags, "--final-lr", "final_lr", "final learning rate");
    bind_key_flag(pre, pre_flags, "--weight-decay", "weight_decay", "decoupled weight decay");
    bind_key_flag(pre, pre_flags, "--temperature", "temperature", "contrastive temperature");
    bind_key_flag(pre, pre_flags, "--queue-capacity", "queue_capacity", "support queue size");
    bind_key_flag(pre, pre_flags, "--k-mine", "k_mine", "neighbors mined per document");
    bind_key_flag(pre, pre_flags, "--lambda", "lambda", "entropy weight");
    bind_key_flag(pre, pre_flags, "--stage2-start-step", "stage2_start_step", "stage 2 start");
    bind_key_flag(pre, pre_flags, "--seed", "seed", "training seed");
    bind_key_flag(pre, pre_flags, "--deterministic", "deterministic", "bitwise-deterministic mode");

    CommonOpts few_opts;
    std::string few_corpus, few_ckpt, few_out, few_split = "test";
    bool few_random = false, few_meta = false;
    auto* few = app.add_subcommand("eval-fewshot", "episodic few-shot classification");
    add_common(few, few_opts);
    std::vector<std::shared_ptr<KeyFlag>> few_flags;
    few->add_option("--corpus", few_corpus)->required();
    few->add_option("--checkpoint", few_ckpt, "trained checkpoint (omit with --random-init)");
    few->add_option("--out", few_out)->required();
    few->add_option("--split", few_split, "corpus split to evaluate on");
    few->add_flag("--random-init", few_random, "evaluate a fresh untrained model");
    few->add_flag("--meta-train", few_meta, "episodic fine-tuning on base classes first");
    bind_key_flag(few, few_flags, "--way", "way", "classes per episode");
    bind_key_flag(few, few_flags, "--shot", "shot", "support samples per class");
    bind_key_flag(few, few_flags, "--query", "query_per_class", "query samples per class");
    bind_key_flag(few, few_flags, "--episodes", "episodes", "episode count");
    bind_key_flag(few, few_flags, "--base-classes", "base_classes", "base class count");
    bind_key_flag(few, few_flags, "--eval-seed", "eval_seed", "episode sampling seed");
    bind_key_flag(few, few_flags, "--modality", "eval_modality", "embedding for meta-train");

    CommonOpts ret_opts;
    std::string ret_corpus, ret_ckpt, ret_out, ret_split = "test";
    bool ret_random = false;
    auto* ret = app.add_subcommand("eval-retrieval", "uni/cross-modal content-based retrieval");
    add_common(ret, ret_opts);
    ret->add_option("--corpus", ret_corpus)->required();
    ret->add_option("--checkpoint", ret_ckpt);
    ret->add_option("--out", ret_out)->required();
    ret->add_option("--split", ret_split);
    ret->add_flag("--random-init", ret_random);

    CommonOpts probe_opts;
    std::string probe_corpus, probe_ckpt, probe_out;
    bool probe_random = false;
    auto* probe = app.add_subcommand("linear-probe", "linear classifier on frozen embeddings");
    add_common(probe, probe_opts);
    std::vector<std::shared_ptr<KeyFlag>> probe_flags;
    probe->add_option("--corpus", probe_corpus)->required();
    probe->add_option("--checkpoint", probe_ckpt);
    probe->add_option("--out", probe_out)->required();
    probe->add_flag("--random-init", probe_random);
    bind_key_flag(probe, probe_flags, "--modality", "eval_modality", "embedding to probe");
    bind_key_flag(probe, probe_flags, "--probe-steps", "probe_steps", "optimizer steps");
    bind_key_flag(probe, probe_flags, "--probe-lr", "probe_lr", "probe learning rate");
    bind_key_flag(probe, probe_flags, "--probe-batch", "probe_batch", "probe batch size");

    CommonOpts exp_opts;
    std::string exp_corpus, exp_ckpt, exp_out, exp_split = "test", exp_modality = "vision";
    auto* exp = app.add_subcommand("export-embeddings", "write an embedding index file");
    add_common(exp, exp_opts);
    exp->add_option("--corpus", exp_corpus)->required();
    exp->add_option("--checkpoint", exp_ckpt)->required();
    exp->add_option("--out", exp_out)->required();
    exp->add_option("--split", exp_split);
    exp->add_option("--modality", exp_modality, "vision, language or multimodal");

    std::string gc_setting = "S3";
    int gc_dim = 8;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient certification");
    gc->add_option("--setting", gc_setting, "S1, S2 or S3");
    gc->add_option("--dim", gc_dim, "hidden width of the certification model");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) {
            RunConfig cfg = resolve_config(gen_opts);
            apply_key_flags(cfg, gen_flags);
            return run_gen_corpus(cfg, gen_out);
        }
        if (pre->parsed()) {
            RunConfig cfg = resolve_config(pre_opts);
            apply_key_flags(cfg, pre_flags);
            return run_pretrain(cfg, pre_corpus, pre_out, pre_resume);
        }
        if (few->parsed()) {
            RunConfig cfg = resolve_config(few_opts);
            if (few_ckpt.empty() && !few_random)
                throw UsageError("eval-fewshot needs --checkpoint or --random-init");
            return run_eval_fewshot(cfg, few_flags, few_corpus, few_ckpt, few_out, few_split,
                                    few_random, few_meta);
        }
        if (ret->parsed()) {
            RunConfig cfg = resolve_config(ret_opts);
            if (ret_ckpt.empty() && !ret_random)
                throw UsageError("eval-retrieval needs --checkpoint or --random-init");
            return run_eval_retrieval(cfg, ret_corpus, ret_ckpt, ret_out, ret_split, ret_random);
        }
        if (probe->parsed()) {
            RunConfig cfg = resolve_config(probe_opts);
            if (probe_ckpt.empty() && !probe_random)
                throw UsageError("linear-probe needs --checkpoint or --random-init");
            return run_linear_probe(cfg, probe_flags, probe_corpus, probe_ckpt, probe_out,
                                    probe_random);
        }
        if (exp->parsed()) {
            RunConfig cfg = resolve_config(exp_opts);
            return run_export(cfg, exp_corpus, exp_ckpt, exp_out, exp_split, exp_modality);
        }
        if (gc->parsed()) return run_gradcheck(gc_setting, gc_dim);
        throw UsageError("no subcommand given");
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help() << "\n";
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
}
