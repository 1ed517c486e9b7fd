// Command-line front end: corpus/split generation, extractor pretraining,
// the two-phase trainer, sampling, and evaluation.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "glyphdiff/eval.hpp"
#include "glyphdiff/sample.hpp"
#include "glyphdiff/scr.hpp"
#include "glyphdiff/train.hpp"

using namespace glyphdiff;

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// key=value lines; '#' starts a comment, blank lines ignored
std::map<std::string, std::string> read_kv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        lineno++;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
        auto key = trim(line.substr(0, eq));
        auto value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
        if (!kv.emplace(key, value).second)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": duplicate key " + key);
    }
    return kv;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::string item;
    std::istringstream ss(s);
    while (std::getline(ss, item, ',')) out.push_back(std::stoi(trim(item)));
    return out;
}

// config keys mirror the trainer/network/schedule field names
void apply_train_config(TrainJob& job, const std::map<std::string, std::string>& kv) {
    for (auto& [key, value] : kv) {
        try {
            if (key == "lambda_cp") job.cfg.lambda_cp = std::stod(value);
            else if (key == "lambda_off") job.cfg.lambda_off = std::stod(value);
            else if (key == "lambda_sc") job.cfg.lambda_sc = std::stod(value);
            else if (key == "lr") job.cfg.lr = std::stod(value);
            else if (key == "batch") job.cfg.batch = std::stoi(value);
            else if (key == "steps") job.cfg.steps = std::stoi(value);
            else if (key == "seed") job.cfg.seed = std::stoull(value);
            else if (key == "cond_drop") job.cfg.cond_drop = std::stod(value);
            else if (key == "scr_layers") job.cfg.scr_layers = parse_int_list(value);
            else if (key == "k_negatives") job.cfg.k_negatives = std::stoi(value);
            else if (key == "tau") job.cfg.tau = std::stod(value);
            else if (key == "T") job.timesteps = std::stoi(value);
            else if (key == "beta_start") job.beta_start = std::stod(value);
            else if (key == "beta_end") job.beta_end = std::stod(value);
            else if (key == "base") job.net.base = std::stoi(value);
            else if (key == "style_dim") job.net.style_dim = std::stoi(value);
            else if (key == "temb_dim") job.net.temb_dim = std::stoi(value);
            else if (key == "time_dim") job.net.time_dim = std::stoi(value);
            else if (key == "gn_groups") job.net.gn_groups = std::stoi(value);
            else if (key == "heads") job.net.heads = std::stoi(value);
            else if (key == "rsi_kernel") job.net.rsi_kernel = std::stoi(value);
            else if (key == "scr_checkpoint") job.scr_checkpoint = value;
            else if (key == "init_checkpoint") job.init_checkpoint = value;
            else if (key == "checkpoint_every") job.checkpoint_every = std::stoi(value);
            else if (key == "csv") job.csv_path = value;
            else throw ConfigError("config: unknown key " + key);
        } catch (const std::invalid_argument&) {
            throw ConfigError("config: bad value for " + key + ": " + value);
        } catch (const std::out_of_range&) {
            throw ConfigError("config: value out of range for " + key + ": " + value);
        }
    }
}

Corpus load_corpus_dir(const std::string& root) {
    return load_corpus(root, root + "/manifest.tsv");
}

SamplerKind parse_sampler(const std::string& name) {
    if (name == "fast") return SamplerKind::FastODE;
    if (name == "ancestral") return SamplerKind::Ancestral;
    throw ConfigError("unknown sampler '" + name + "' (want fast or ancestral)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"one-shot glyph style transfer toolkit"};
    app.require_subcommand(1);

    // make-corpus
    auto* mc = app.add_subcommand("make-corpus", "render a synthetic glyph corpus to PNG files");
    CorpusConfig cc;
    std::string mc_out;
    mc->add_option("--n-fonts", cc.n_fonts, "font count")->capture_default_str();
    mc->add_option("--n-chars", cc.n_chars, "char count")->capture_default_str();
    mc->add_option("--resolution", cc.resolution, "image size (32, 64 or 96)")->capture_default_str();
    mc->add_option("--seed", cc.seed, "corpus seed")->capture_default_str();
    mc->add_option("--out", mc_out, "output directory")->required();
    mc->callback([&] {
        auto corpus = render_synthetic(cc);
        save_corpus(corpus, mc_out);
        std::printf("wrote %zu glyphs (%d fonts x %d chars) to %s\n", corpus.glyphs.size(),
                    cc.n_fonts, cc.n_chars, mc_out.c_str());
    });

    // make-splits
    auto* ms = app.add_subcommand("make-splits", "draw seen/unseen font and char splits");
    std::string ms_corpus, ms_out;
    SplitFractions fr;
    uint64_t ms_seed = 0;
    ms->add_option("--corpus", ms_corpus, "corpus directory")->required();
    ms->add_option("--unseen-font-frac", fr.unseen_font_frac)->capture_default_str();
    ms->add_option("--unseen-char-frac", fr.unseen_char_frac)->capture_default_str();
    ms->add_option("--seed", ms_seed, "shuffle seed")->capture_default_str();
    ms->add_option("--out", ms_out, "output TSV path")->required();
    ms->callback([&] {
        auto corpus = load_corpus_dir(ms_corpus);
        auto split = make_splits(corpus, fr, ms_seed);
        save_splits(split, ms_out);
        std::printf("splits: %zu/%zu seen/unseen fonts, %zu/%zu seen/unseen chars -> %s\n",
                    split.seen_fonts.size(), split.unseen_fonts.size(), split.seen_chars.size(),
                    split.unseen_chars.size(), ms_out.c_str());
    });

    // pretrain-scr
    auto* ps = app.add_subcommand("pretrain-scr", "pretrain the style-contrastive extractor");
    std::string ps_corpus, ps_out;
    ScrPretrainConfig pc;
    int ps_trials = 0;
    ps->add_option("--corpus", ps_corpus, "corpus directory")->required();
    ps->add_option("--steps", pc.steps, "optimization steps")->capture_default_str();
    ps->add_option("--batch", pc.batch, "anchors per step")->capture_default_str();
    ps->add_option("--lr", pc.lr, "peak learning rate")->capture_default_str();
    ps->add_option("--warmup", pc.warmup, "linear warmup steps")->capture_default_str();
    ps->add_option("--k", pc.K, "negatives per anchor")->capture_default_str();
    ps->add_option("--tau", pc.tau, "contrastive temperature")->capture_default_str();
    ps->add_option("--weight-decay", pc.weight_decay)->capture_default_str();
    ps->add_option("--seed", pc.seed, "training seed")->capture_default_str();
    ps->add_option("--trials", ps_trials, "retrieval probe trials after training (0 = skip)")
        ->capture_default_str();
    ps->add_option("--out", ps_out, "checkpoint prefix")->required();
    ps->callback([&] {
        auto corpus = load_corpus_dir(ps_corpus);
        ScrExtractor<float> ext(ScrConfig{}, pc.seed);
        auto losses = pretrain_scr(ext, corpus, pc);
        auto recs = records_from_store(ext.ps);
        for (auto& r : scr_config_records(ext.cfg)) recs.push_back(r);
        save_records(ps_out, recs);
        std::printf("pretrained %d steps, loss %.4f -> %.4f, checkpoint %s\n", pc.steps,
                    losses.front(), losses.back(), ps_out.c_str());
        if (ps_trials > 0) {
            double acc = retrieval_eval(ext, corpus, ps_trials, pc.seed);
            std::printf("retrieval accuracy over %d trials: %.4f\n", ps_trials, acc);
        }
    });

    // train
    auto* tr = app.add_subcommand("train", "run one training phase");
    TrainJob job;
    std::string tr_config, tr_corpus, tr_splits;
    tr->add_option("--phase", job.phase, "1 or 2")->required();
    tr->add_option("--config", tr_config, "key=value config file")->required();
    tr->add_option("--corpus", tr_corpus, "corpus directory")->required();
    tr->add_option("--out", job.out_prefix, "checkpoint prefix")->required();
    tr->add_option("--resume", job.resume_checkpoint, "checkpoint prefix to resume from");
    tr->add_option("--splits", tr_splits, "splits TSV restricting training to seen pairs");
    tr->callback([&] {
        if (job.phase == 1) job.cfg.lr = 1e-4;  // phase-1 default; the config file may override
        apply_train_config(job, read_kv(tr_config));
        auto corpus = load_corpus_dir(tr_corpus);
        if (!tr_splits.empty()) job.split = load_splits(tr_splits);
        auto outcome = train<float>(job, corpus);
        std::printf("phase %d: %zu steps, final loss %.6f, checkpoint %s\n", job.phase,
                    outcome.losses.size(),
                    outcome.losses.empty() ? 0.0 : outcome.losses.back().total,
                    outcome.checkpoint.c_str());
    });

    // sample
    auto* sa = app.add_subcommand("sample", "generate glyphs from a checkpoint");
    std::string sa_ckpt, sa_content, sa_style, sa_out, sa_list, sa_sampler = "fast";
    GuidanceConfig g;
    sa->add_option("--ckpt", sa_ckpt, "model checkpoint prefix")->required();
    sa->add_option("--content", sa_content, "content glyph PNG");
    sa->add_option("--style", sa_style, "style reference PNG");
    sa->add_option("--scale", g.scale, "guidance scale")->capture_default_str();
    sa->add_option("--steps", g.steps, "fast-sampler evaluations")->capture_default_str();
    sa->add_option("--sampler", sa_sampler, "fast or ancestral")->capture_default_str();
    sa->add_option("--seed", g.seed, "sampling seed")->capture_default_str();
    sa->add_option("--out", sa_out, "output PNG (the contact sheet in list mode)")->required();
    sa->add_option("--list", sa_list, "TSV of content_path style_path out_path rows");
    sa->callback([&] {
        g.sampler = parse_sampler(sa_sampler);
        if (!sa_list.empty()) {
            generate_batch(sa_ckpt, sa_list, g, sa_out);
            std::printf("wrote batch outputs and sheet %s\n", sa_out.c_str());
            return;
        }
        if (sa_content.empty() || sa_style.empty())
            throw ConfigError("sample: need --content and --style (or --list)");
        generate(sa_ckpt, sa_content, sa_style, g, sa_out);
        std::printf("wrote %s\n", sa_out.c_str());
    });

    // eval
    auto* ev = app.add_subcommand("eval", "score a checkpoint over the split protocols");
    std::string ev_ckpt, ev_scr, ev_corpus, ev_splits, ev_out, ev_sampler = "fast";
    GuidanceConfig eg;
    ev->add_option("--ckpt", ev_ckpt, "model checkpoint prefix")->required();
    ev->add_option("--scr", ev_scr, "extractor checkpoint prefix")->required();
    ev->add_option("--corpus", ev_corpus, "corpus directory")->required();
    ev->add_option("--splits", ev_splits, "splits TSV")->required();
    ev->add_option("--out", ev_out, "report directory")->required();
    ev->add_option("--scale", eg.scale)->capture_default_str();
    ev->add_option("--steps", eg.steps)->capture_default_str();
    ev->add_option("--sampler", ev_sampler)->capture_default_str();
    ev->add_option("--seed", eg.seed)->capture_default_str();
    ev->callback([&] {
        eg.sampler = parse_sampler(ev_sampler);
        auto corpus = load_corpus_dir(ev_corpus);
        auto split = load_splits(ev_splits);
        auto report = evaluate(ev_ckpt, ev_scr, corpus, split, eg, ev_out);
        for (EvalSplit which : {EvalSplit::SFUC, EvalSplit::UFSC, EvalSplit::UFUC}) {
            const auto& avg = report.at(which, 3);
            std::printf("%s: n=%lld ssim=%.4f l1=%.4f scr_dist=%.4f\n", eval_split_name(which),
                        static_cast<long long>(avg.n), avg.ssim, avg.l1, avg.scr_dist);
        }
        std::printf("report written to %s/report.csv\n", ev_out.c_str());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
