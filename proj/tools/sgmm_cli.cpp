// SPDX-License-Identifier: Apache-2.0
// sgmm: command-line front end for data generation, UBM training, code
// extraction, end-to-end training, evaluation and the co-watch experiments.
//
// Exit codes: 0 ok, 1 usage, 2 data error, 3 gradient check failed.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "sgmm/binary_io.hpp"
#include "sgmm/data.hpp"
#include "sgmm/gmm.hpp"
#include "sgmm/metrics.hpp"
#include "sgmm/reco_run.hpp"
#include "sgmm/simd.hpp"
#include "sgmm/stats_pool.hpp"
#include "sgmm/trainer.hpp"

using namespace sgmm;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitGradcheck = 3;

// Options shared by the pooling-layer subcommands.
struct PoolArgs {
  std::string pool = "dsgmm";
  std::string variant = "decoupled";
  std::size_t k = 256;
  double gamma = 0.125;
  bool intra_norm = true;
  bool final_norm = false;
  bool shared_means = true;
};

// Flags do not capture their bound default, so record it explicitly for the
// resolved-config printout.
CLI::Option* add_bool(CLI::App* app, const std::string& names, bool& v, const std::string& desc = "") {
  return app->add_flag(names, v, desc)->default_str(v ? "true" : "false");
}

void add_pool_args(CLI::App* app, PoolArgs& a, bool allow_avg) {
  std::vector<std::string> pools{"netvlad", "dsgmm"};
  if (allow_avg) pools.insert(pools.begin(), "avg");
  app->add_option("--pool", a.pool, "pooling layer")->check(CLI::IsMember(pools));
  app->add_option("--variant", a.variant, "assignment variant")
      ->check(CLI::IsMember({"decoupled", "uniform-priors", "shared-spherical", "spherical",
                             "shared-diagonal", "diagonal"}));
  app->add_option("--k", a.k, "clusters")->check(CLI::PositiveNumber);
  app->add_option("--gamma", a.gamma, "relevance factor")->check(CLI::NonNegativeNumber);
  add_bool(app, "--intra-norm,!--no-intra-norm", a.intra_norm, "L2 normalize each cluster row");
  add_bool(app, "--final-norm,!--no-final-norm", a.final_norm, "L2 normalize the whole code");
  add_bool(app, "--shared-means,!--anchor", a.shared_means,
                "coupled variants aggregate around their own means");
}

PoolSpec pool_spec(const PoolArgs& a, std::size_t dim) {
  PoolSpec s;
  s.code = a.pool == "netvlad" ? CodeKind::kVlad : CodeKind::kDsgmm;
  s.variant = *parse_variant(a.variant);
  s.k = a.k;
  s.dim = dim;
  s.gamma = a.gamma;
  s.intra_norm = a.intra_norm;
  s.final_norm = a.final_norm;
  s.shared_means = a.shared_means;
  return s;
}

// "key = value" lines become "--key=value" arguments placed right after the
// subcommand, so flags given on the command line win.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  for (std::size_t i = 1; i < args.size(); ++i) {
    std::string path;
    std::size_t drop = 0;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      drop = 2;
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      drop = 1;
    } else {
      continue;
    }
    std::ifstream f(path);
    if (!f) throw DataError("cannot read config file " + path);
    std::vector<std::string> extra;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw CLI::ValidationError("config", path + ":" + std::to_string(lineno) + ": expected key=value");
      }
      auto trim = [](std::string s) {
        const auto l = s.find_first_not_of(" \t\r");
        const auto r = s.find_last_not_of(" \t\r");
        return l == std::string::npos ? std::string() : s.substr(l, r - l + 1);
      };
      extra.push_back("--" + trim(line.substr(0, eq)) + "=" + trim(line.substr(eq + 1)));
    }
    args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i + drop));
    // args[1] is the subcommand.
    args.insert(args.begin() + 2, extra.begin(), extra.end());
    break;
  }
  return args;
}

void print_resolved(const CLI::App* sub) {
  std::cerr << "# resolved config: " << sub->get_name() << "\n";
  std::istringstream in(sub->config_to_str(true, false));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) std::cerr << "#   " << line << "\n";
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f << text;
}

std::string with_suffix(const std::string& path, const std::string& tag) {
  const auto dot = path.rfind('.');
  const auto slash = path.rfind('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return path + "." + tag;
  return path.substr(0, dot) + "." + tag + path.substr(dot);
}

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SGMM / DSGMM video pooling toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();
  std::string simd_backend;
  app.add_option("--simd", simd_backend, "kernel backend (default: best available)")
      ->check(CLI::IsMember({"scalar", "avx2", "neon"}));

  std::uint64_t seed = 1;
  std::size_t threads = 1;
  std::string config_path;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--config", config_path, "key=value file with option defaults");
  };
  auto with_threads = [&](CLI::App* sub) {
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  };

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic classification dataset");
  SynthConfig synth;
  std::string gen_out;
  double train_frac = 0.0, val_frac = 0.0;
  common(gen);
  gen->add_option("--out", gen_out, "VSEQ output path")->required();
  gen->add_option("--classes", synth.num_classes);
  gen->add_option("--clusters", synth.num_clusters_true, "latent clusters (even)");
  gen->add_option("--dim", synth.dim);
  gen->add_option("--videos-per-class", synth.videos_per_class);
  gen->add_option("--frames-min", synth.frames_min);
  gen->add_option("--frames-max", synth.frames_max);
  gen->add_option("--spread", synth.cluster_spread);
  gen->add_option("--radius", synth.centroid_radius);
  gen->add_option("--max-labels", synth.max_labels);
  gen->add_option("--train-frac", train_frac, "also write .train/.val/.test splits when > 0");
  gen->add_option("--val-frac", val_frac);

  // gen-cowatch
  auto* gcw = app.add_subcommand("gen-cowatch", "generate synthetic co-watch sessions");
  CowatchConfig cwc;
  std::string cw_videos, cw_out;
  common(gcw);
  gcw->add_option("--videos", cw_videos, "VSEQ video pool")->required();
  gcw->add_option("--out", cw_out, "output prefix")->required();
  gcw->add_option("--users", cwc.users);
  gcw->add_option("--sessions", cwc.sessions_per_user);
  gcw->add_option("--videos-per-session", cwc.videos_per_session);
  gcw->add_option("--sharpness", cwc.sharpness);
  gcw->add_option("--topic-concentration", cwc.topic_concentration);
  gcw->add_option("--user-bias-sd", cwc.user_bias_sd);
  gcw->add_option("--negatives", cwc.negatives_per_pair);

  // train-ubm
  auto* ubm_cmd = app.add_subcommand("train-ubm", "fit the universal background model with EM");
  std::string ubm_data, ubm_out, ubm_json, ubm_cov = "diagonal", ubm_init = "kmeans";
  std::size_t ubm_k = 256, ubm_max_frames = 0;
  EmConfig em;
  common(ubm_cmd);
  ubm_cmd->add_option("--data", ubm_data, "VSEQ input")->required();
  ubm_cmd->add_option("--out", ubm_out, "GMM1 output path")->required();
  ubm_cmd->add_option("--json", ubm_json, "also export parameters as JSON");
  ubm_cmd->add_option("--k", ubm_k)->check(CLI::PositiveNumber);
  ubm_cmd->add_option("--cov", ubm_cov)
      ->check(CLI::IsMember({"shared-full", "shared-spherical", "spherical", "shared-diagonal", "diagonal"}));
  ubm_cmd->add_option("--init", ubm_init)->check(CLI::IsMember({"kmeans", "random"}));
  ubm_cmd->add_option("--iters", em.max_iters);
  ubm_cmd->add_option("--tol", em.rel_tol);
  ubm_cmd->add_option("--variance-floor", em.variance_floor);
  ubm_cmd->add_option("--max-frames", ubm_max_frames, "subsample frames (0 = all)");

  // extract
  auto* ext = app.add_subcommand("extract", "unsupervised video codes against a UBM");
  std::string ext_data, ext_ubm, ext_out, ext_pool = "sgmm";
  double ext_gamma = 0.125;
  bool ext_intra = false, ext_final = false;
  common(ext);
  ext->add_option("--data", ext_data, "VSEQ input")->required();
  ext->add_option("--ubm", ext_ubm, "GMM1 (not needed for avg)");
  ext->add_option("--out", ext_out, "VCOD output path")->required();
  ext->add_option("--pool", ext_pool)->check(CLI::IsMember({"avg", "bow", "vlad", "sgmm"}));
  ext->add_option("--gamma", ext_gamma)->check(CLI::NonNegativeNumber);
  add_bool(ext, "--intra-norm,!--no-intra-norm", ext_intra);
  add_bool(ext, "--final-norm,!--no-final-norm", ext_final);

  // train
  auto* tr = app.add_subcommand("train", "train pooling + classifier end to end");
  PoolArgs tr_pool;
  TrainConfig tcfg;
  std::string tr_train, tr_val, tr_out, tr_last, tr_resume, tr_resume_best, tr_log, tr_ubm;
  std::size_t experts = 2;
  bool input_gate = true, output_gate = true, freeze_pool = false;
  common(tr);
  with_threads(tr);
  add_pool_args(tr, tr_pool, true);
  tr->add_option("--train", tr_train, "VSEQ training set")->required();
  tr->add_option("--val", tr_val, "VSEQ validation set")->required();
  tr->add_option("--out", tr_out, "best checkpoint")->required();
  tr->add_option("--last", tr_last, "also save the final state (for --resume)");
  tr->add_option("--resume", tr_resume, "continue from a --last checkpoint");
  tr->add_option("--resume-best", tr_resume_best, "best checkpoint of the interrupted run");
  tr->add_option("--log", tr_log, "CSV metric log");
  tr->add_option("--ubm", tr_ubm, "initialise the pooling layer from a GMM1 file");
  add_bool(tr, "--freeze-pool", freeze_pool, "keep the pooling layer at its initialisation");
  tr->add_option("--experts", experts)->check(CLI::PositiveNumber);
  add_bool(tr, "--input-gate,!--no-input-gate", input_gate);
  add_bool(tr, "--output-gate,!--no-output-gate", output_gate);
  tr->add_option("--lr", tcfg.lr);
  tr->add_option("--clip", tcfg.clip_hi, "clip gradients into [-c, c]")->check(CLI::PositiveNumber);
  tr->add_option("--decay", tcfg.decay_factor);
  tr->add_option("--decay-every", tcfg.decay_every);
  tr->add_option("--frames", tcfg.frames_per_video, "frames sampled per video");
  tr->add_option("--batch", tcfg.batch_size);
  tr->add_option("--steps", tcfg.max_steps);
  tr->add_option("--eval-every", tcfg.eval_every);

  // eval
  auto* ev = app.add_subcommand("eval", "GAP and Hit@1 of a checkpoint");
  std::string ev_ckpt, ev_data;
  std::size_t ev_frames = 30;
  common(ev);
  with_threads(ev);
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--data", ev_data, "VSEQ input")->required();
  ev->add_option("--frames", ev_frames, "frames sampled per video (0 = all)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every gradient block");
  PoolArgs gc_pool;
  gc_pool.k = 3;
  std::size_t gc_dim = 4, gc_coords = 20, gc_classes = 3;
  double gc_h = 1e-5, gc_threshold = 1e-4;
  common(gc);
  add_pool_args(gc, gc_pool, true);
  gc->add_option("--dim", gc_dim)->check(CLI::PositiveNumber);
  gc->add_option("--classes", gc_classes)->check(CLI::PositiveNumber);
  gc->add_option("--coords", gc_coords, "coordinates per block");
  gc->add_option("--fd-step", gc_h, "central difference step");
  gc->add_option("--threshold", gc_threshold);

  // reco-train
  auto* rt = app.add_subcommand("reco-train", "triplet training of the video embedding");
  PoolArgs rt_pool;
  RecoTrainConfig rtc;
  EmbedSpec rt_embed;
  std::string rt_videos, rt_cw, rt_out, rt_ubm, rt_log;
  common(rt);
  add_pool_args(rt, rt_pool, true);
  rt->add_option("--videos", rt_videos, "VSEQ video pool")->required();
  rt->add_option("--cowatch", rt_cw, "gen-cowatch prefix")->required();
  rt->add_option("--out", rt_out, "checkpoint")->required();
  rt->add_option("--ubm", rt_ubm, "initialise the pooling layer from a GMM1 file");
  rt->add_option("--log", rt_log, "CSV of per-step triplet loss");
  rt->add_option("--hidden", rt_embed.hidden)->check(CLI::PositiveNumber);
  rt->add_option("--embed-dim", rt_embed.out)->check(CLI::PositiveNumber);
  rt->add_option("--lr", rtc.lr);
  rt->add_option("--margin", rtc.margin)->check(CLI::NonNegativeNumber);
  rt->add_option("--batch", rtc.batch_size);
  rt->add_option("--frames", rtc.frames_per_video);
  rt->add_option("--steps", rtc.steps);

  // reco-eval
  auto* re = app.add_subcommand("reco-eval", "held-out watch prediction AUCs");
  std::string re_ckpt, re_videos, re_cw;
  RecoEvalConfig rec;
  common(re);
  re->add_option("--ckpt", re_ckpt)->required();
  re->add_option("--videos", re_videos, "VSEQ video pool")->required();
  re->add_option("--cowatch", re_cw, "gen-cowatch prefix")->required();
  re->add_option("--frames", rec.frames_per_video, "frames sampled per video (0 = all)");
  re->add_option("--prior", rec.glmix_prior, "GLMix L2 prior on user effects")->check(CLI::PositiveNumber);

  if (argc < 2) {
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    std::vector<std::string> args(argv, argv + argc);
    args = expand_config(args);
    std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
    app.parse(std::move(rev));
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }

  try {
    if (!simd_backend.empty()) {
      simd::set_backend(simd_backend == "scalar" ? simd::Backend::kScalar
                        : simd_backend == "avx2" ? simd::Backend::kAvx2
                                                 : simd::Backend::kNeon);
    }
    CLI::App* sub = app.get_subcommands().front();
    print_resolved(sub);

    if (sub == gen) {
      synth.seed = seed;
      const Dataset ds = gen_classification(synth);
      write_vseq(ds, gen_out);
      if (train_frac > 0.0) {
        const DatasetSplit s = split_dataset(ds, train_frac, val_frac, seed);
        write_vseq(s.train, with_suffix(gen_out, "train"));
        write_vseq(s.val, with_suffix(gen_out, "val"));
        write_vseq(s.test, with_suffix(gen_out, "test"));
      }
      std::cerr << "wrote " << ds.records.size() << " videos\n";
    } else if (sub == gcw) {
      cwc.seed = seed;
      const CowatchData d = gen_cowatch(read_vseq(cw_videos), cwc);
      write_cowatch(d, cw_out);
      std::cerr << "wrote " << d.events.size() << " events, " << d.triplets.size() << " triplets\n";
    } else if (sub == ubm_cmd) {
      em.seed = seed;
      em.init = ubm_init == "kmeans" ? EmInit::kKMeans : EmInit::kRandomResponsibility;
      const Dataset ds = read_vseq(ubm_data);
      EmTrace trace;
      const GmmModel m = train_ubm(stack_frames(ds, ubm_max_frames, seed), ubm_k, *parse_cov_kind(ubm_cov), em, &trace);
      save_gmm(m, ubm_out);
      if (!ubm_json.empty()) write_text(ubm_json, gmm_to_json(m));
      std::cerr << "EM iterations " << trace.loglik.size() << ", final loglik "
                << (trace.loglik.empty() ? 0.0 : trace.loglik.back()) << "\n";
    } else if (sub == ext) {
      const Dataset ds = read_vseq(ext_data);
      GmmModel ubm;
      if (ext_pool != "avg") {
        if (ext_ubm.empty()) throw CLI::ValidationError("--ubm", "required for --pool " + ext_pool);
        ubm = load_gmm(ext_ubm);
      }
      std::vector<CodeEntry> out;
      for (const auto& r : ds.records) {
        VideoCode c;
        if (ext_pool == "avg") {
          c = avg_pool(r.frames);
        } else {
          const SufficientStats s = accumulate(ubm, r, SecondOrder::kNone);
          c = ext_pool == "bow" ? bow_code(s) : ext_pool == "vlad" ? vlad_code(s, ubm) : sgmm_code(s, ubm, ext_gamma);
        }
        normalize(c, ext_intra, ext_final);
        out.push_back({r.id, r.labels, std::move(c.values)});
      }
      write_vcod(out, ext_out);
      std::cerr << "wrote " << out.size() << " codes\n";
    } else if (sub == tr) {
      tcfg.seed = seed;
      tcfg.threads = threads;
      tcfg.clip_lo = -tcfg.clip_hi;
      validate(tcfg);
      const Dataset train_ds = read_vseq(tr_train);
      const Dataset val_ds = read_vseq(tr_val);
      if (val_ds.dim != train_ds.dim) throw DataError("train and val dimensions differ");
      ModelSpec spec;
      spec.pool = tr_pool.pool == "avg" ? PoolKind::kAvg : PoolKind::kDeep;
      spec.deep = pool_spec(tr_pool, train_ds.dim);
      spec.num_classes = std::max(train_ds.num_classes, val_ds.num_classes);
      spec.experts = experts;
      spec.input_gate = input_gate;
      spec.output_gate = output_gate;
      spec.freeze_pool = freeze_pool;

      Model init;
      Checkpoint last_ck, best_ck;
      const Checkpoint* resume_last = nullptr;
      const Checkpoint* resume_best = nullptr;
      if (!tr_resume.empty()) {
        last_ck = load_checkpoint(tr_resume);
        init = model_from_checkpoint(last_ck);
        resume_last = &last_ck;
        if (!tr_resume_best.empty()) {
          best_ck = load_checkpoint(tr_resume_best);
          resume_best = &best_ck;
        }
      } else {
        SplitMix64 rng(seed);
        PoolParams from_ubm;
        if (!tr_ubm.empty() && spec.pool == PoolKind::kDeep) from_ubm = init_from_ubm(load_gmm(tr_ubm), spec.deep);
        init = make_model(spec, rng, tr_ubm.empty() ? nullptr : &from_ubm);
      }
      const TrainResult res = train(train_ds, val_ds, std::move(init), tcfg, resume_last, resume_best,
                                    [](const LogRow& r) {
                                      std::cerr << "step " << r.step << " train " << r.train_loss
                                                << " val " << r.val_loss << " gap " << r.gap << "\n";
                                    });
      save_checkpoint(res.best, tr_out);
      if (!tr_last.empty()) save_checkpoint(res.last, tr_last);
      if (!tr_log.empty()) write_text(tr_log, format_log(res.log));
    } else if (sub == ev) {
      const Model m = model_from_checkpoint(load_checkpoint(ev_ckpt));
      const Dataset ds = read_vseq(ev_data);
      if (ds.dim != m.spec.deep.dim && m.spec.pool == PoolKind::kDeep) throw DataError("dimension does not match checkpoint");
      const EvalResult r = evaluate(m, ds, ev_frames, seed, threads);
      nlohmann::ordered_json j;
      j["gap"] = r.gap;
      j["hit1"] = r.hit1;
      j["n_videos"] = ds.records.size();
      std::cout << j.dump() << "\n";
    } else if (sub == gc) {
      ModelSpec spec;
      spec.pool = gc_pool.pool == "avg" ? PoolKind::kAvg : PoolKind::kDeep;
      spec.deep = pool_spec(gc_pool, gc_dim);
      spec.num_classes = gc_classes;
      const GradcheckReport rep = gradcheck(spec, seed, gc_coords, gc_h);
      for (const auto& b : rep.blocks) {
        std::printf("%-24s coords %3zu  max rel err %.3e\n", b.name.c_str(), b.coords, b.max_rel_err);
      }
      std::printf("max rel err %.3e (threshold %.1e)\n", rep.max_rel_err, gc_threshold);
      return rep.passed(gc_threshold) ? 0 : kExitGradcheck;
    } else if (sub == rt) {
      rtc.seed = seed;
      const Dataset videos = read_vseq(rt_videos);
      const CowatchData cw = read_cowatch(rt_cw);
      RecoSpec spec;
      spec.pool = rt_pool.pool == "avg" ? PoolKind::kAvg : PoolKind::kDeep;
      spec.deep = pool_spec(rt_pool, videos.dim);
      spec.embed = rt_embed;
      SplitMix64 rng(seed);
      PoolParams from_ubm;
      if (!rt_ubm.empty() && spec.pool == PoolKind::kDeep) from_ubm = init_from_ubm(load_gmm(rt_ubm), spec.deep);
      RecoModel init = make_reco_model(spec, rng, rt_ubm.empty() ? nullptr : &from_ubm);
      const RecoTrainResult res = train_reco(videos, cw, std::move(init), rtc);
      save_checkpoint(make_reco_checkpoint(res.model, seed, rtc.steps), rt_out);
      if (!rt_log.empty()) {
        std::ostringstream s;
        s << "step,triplet_loss\n";
        char buf[64];
        for (std::size_t i = 0; i < res.batch_loss.size(); ++i) {
          std::snprintf(buf, sizeof buf, "%zu,%.10g\n", i + 1, res.batch_loss[i]);
          s << buf;
        }
        write_text(rt_log, s.str());
      }
      if (!res.batch_loss.empty()) std::cerr << "final batch loss " << res.batch_loss.back() << "\n";
    } else if (sub == re) {
      rec.seed = seed;
      const RecoModel m = reco_model_from_checkpoint(load_checkpoint(re_ckpt));
      const RecoEvalResult r = evaluate_reco(m, read_vseq(re_videos), read_cowatch(re_cw), rec);
      nlohmann::ordered_json j;
      j["auc_avg_sim"] = number_or_null(r.auc_avg_sim);
      j["auc_max_sim"] = number_or_null(r.auc_max_sim);
      j["auc_glmix"] = number_or_null(r.auc_glmix);
      j["auc_glmix_coldstart"] = number_or_null(r.auc_glmix_coldstart);
      std::cout << j.dump() << "\n";
    }
  } catch (const CLI::Error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
