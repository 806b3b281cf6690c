#include "cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "geomatch/geomatch.hpp"

namespace geomatch::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

// ---------------------------------------------------------------------------
// Helpers

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !(is >> std::ws).eof()) {
      throw UsageError(std::string("invalid ") + what + " entry '" + item + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(std::string("empty ") + what + " list");
  return out;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

/// One manifest per invocation; only the "wall_clock" object varies between
/// identical runs.
struct Manifest {
  std::string command;
  json config = json::object();
  std::uint64_t seed = 0;
  json artifacts = json::object();
  std::string started = utc_timestamp();
  Clock::time_point t0 = Clock::now();

  void write(const fs::path& path) const {
    json j{{"command", command},
           {"config", config},
           {"seed", seed},
           {"artifacts", artifacts},
           {"version", std::string(kVersion)},
           {"wall_clock",
            {{"started_utc", started},
             {"elapsed_s", std::chrono::duration<double>(Clock::now() - t0).count()}}}};
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw DataError("cannot write manifest '" + path.string() + "'");
    f << j.dump(2) << "\n";
  }
};

std::vector<Image> read_corpus(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("corpus directory '" + dir.string() + "' not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no PNG images in '" + dir.string() + "'");
  std::vector<Image> corpus;
  corpus.reserve(files.size());
  for (const auto& f : files) {
    corpus.push_back(read_png(f.string()));
    if (corpus.back().height != corpus.back().width || !corpus.back().same_shape(corpus.front())) {
      throw DataError("corpus images must be square and equally sized: '" + f.string() + "'");
    }
  }
  return corpus;
}

std::vector<HomographySample> read_nonempty_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory '" + dir.string() + "' not found");
  auto data = read_dataset(dir);
  if (data.empty()) throw DataError("dataset '" + dir.string() + "' has no samples");
  return data;
}

TransformParams params_from_list(const std::vector<double>& v) {
  switch (v.size()) {
    case 6: return {TransformKind::Affine, v};
    case 9: return {TransformKind::Homography, v};
    case 18: return {TransformKind::Tps, v};
    default:
      throw UsageError("--params needs 6 (affine), 9 (homography) or 18 (tps) values, got " +
                       std::to_string(v.size()));
  }
}

json params_json(const TransformParams& t) {
  return {{"kind", std::string(to_string(t.kind()))}, {"params", t.values()}};
}

// ---------------------------------------------------------------------------
// Subcommands. Each registers its flags and returns the action to run after parsing.

struct Context {
  std::ostream& out;
  std::ostream& err;
};

using Action = std::function<void(Context&)>;

Action add_gen_corpus(CLI::App& app) {
  auto* cmd = app.add_subcommand("gen-corpus", "Render a corpus of toy images");
  auto o = std::make_shared<std::tuple<std::string, int, int, std::uint64_t>>("", 100, 64, 0);
  cmd->add_option("--out", std::get<0>(*o), "Output directory")->required();
  cmd->add_option("--count", std::get<1>(*o), "Number of images")->check(CLI::NonNegativeNumber);
  cmd->add_option("--size", std::get<2>(*o), "Image side in pixels")->check(CLI::Range(16, 4096));
  cmd->add_option("--seed", std::get<3>(*o), "Master seed");
  return [cmd, o](Context& ctx) {
    if (!*cmd) return;
    const auto& [out, count, size, seed] = *o;
    Manifest m{"gen-corpus"};
    m.config = {{"out", out}, {"count", count}, {"size", size}, {"seed", seed}};
    m.seed = seed;
    fs::create_directories(out);
    const auto corpus = generate_corpus(count, size, seed);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      write_png((fs::path(out) / ("img_" + sample_stem(static_cast<int>(i)) + ".png")).string(), corpus[i]);
    }
    m.artifacts = {{"images", out}, {"manifest", (fs::path(out) / "run_manifest.json").string()}};
    m.write(fs::path(out) / "run_manifest.json");
    ctx.err << "gen-corpus: wrote " << corpus.size() << " images to " << out << "\n";
    ctx.out << json{{"images", corpus.size()}, {"out", out}}.dump() << "\n";
  };
}

Action add_gen_data(CLI::App& app) {
  auto* cmd = app.add_subcommand("gen-data", "Generate a homography dataset from a corpus");
  struct Opts {
    std::string corpus, out;
    GenConfig gen;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--corpus", o->corpus, "Corpus directory of PNG images")->required();
  cmd->add_option("--out", o->out, "Output dataset directory")->required();
  cmd->add_option("--count", o->gen.count, "Number of samples")->check(CLI::NonNegativeNumber);
  cmd->add_option("--max-perturb", o->gen.max_perturb_frac, "Max corner offset as image fraction")
      ->check(CLI::Range(0.0, 0.5));
  cmd->add_option("--seed", o->gen.seed, "Master seed");
  return [cmd, o](Context& ctx) {
    if (!*cmd) return;
    Manifest m{"gen-data"};
    auto corpus = read_corpus(o->corpus);
    o->gen.image_size = corpus.front().height;
    m.config = {{"corpus", o->corpus},
                {"out", o->out},
                {"count", o->gen.count},
                {"max_perturb", o->gen.max_perturb_frac},
                {"image_size", o->gen.image_size},
                {"seed", o->gen.seed}};
    m.seed = o->gen.seed;
    const auto data = generate_dataset(corpus, o->gen);
    write_dataset(o->out, data);
    m.artifacts = {{"manifest_jsonl", (fs::path(o->out) / "manifest.jsonl").string()},
                   {"images", (fs::path(o->out) / "images").string()}};
    m.write(fs::path(o->out) / "run_manifest.json");
    ctx.err << "gen-data: wrote " << data.size() << " samples to " << o->out << "\n";
    ctx.out << json{{"samples", data.size()}, {"out", o->out}}.dump() << "\n";
  };
}

Action add_train(CLI::App& app) {
  auto* cmd = app.add_subcommand("train", "Train a matcher on a dataset");
  struct Opts {
    std::string data, out, transform = "homo", loss = "weighted", corr = "pearson", stage1;
    std::string channels = "16,32,16";
    int reg_channels = 16;
    TrainConfig train;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--data", o->data, "Dataset directory")->required();
  cmd->add_option("--out", o->out, "Checkpoint path")->required();
  cmd->add_option("--transform", o->transform, "Regressed transform")
      ->check(CLI::IsMember({"affine", "homo", "homo8", "tps"}));
  cmd->add_option("--loss", o->loss, "Training loss")->check(CLI::IsMember({"weighted", "grid", "mse"}));
  cmd->add_option("--corr", o->corr, "Correlation layer")->check(CLI::IsMember({"pearson", "cosine"}));
  cmd->add_option("--sigma", o->train.loss.weights.sigma, "Gaussian weight width");
  cmd->add_option("--gamma", o->train.loss.weights.gamma, "Gaussian weight cutoff");
  cmd->add_option("--epochs", o->train.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
  cmd->add_option("--lr", o->train.learning_rate, "Adam learning rate");
  cmd->add_option("--batch", o->train.batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", o->train.seed, "Initialization and shuffling seed");
  cmd->add_option("--channels", o->channels, "Extractor channels per stride-2 stage");
  cmd->add_option("--reg-channels", o->reg_channels, "Regressor conv channels")->check(CLI::PositiveNumber);
  cmd->add_option("--stage1", o->stage1,
                  "Stage-1 checkpoint; trains on sources pre-warped by its estimate");
  return [cmd, o](Context& ctx) {
    if (!*cmd) return;
    Manifest m{"train"};
    auto data = read_nonempty_dataset(o->data);
    TrainConfig cfg = o->train;
    cfg.loss.kind = parse_loss_kind(o->loss);
    cfg.correlation = parse_correlation_kind(o->corr);
    ExtractorSpec ext;
    ext.channels = parse_list<int>(o->channels, "channel");
    ext.input_size = data.front().source.height;
    RegressorSpec reg;
    reg.conv_channels = o->reg_channels;
    reg.eight_param = o->transform == "homo8";
    reg.kind = parse_transform_kind(reg.eight_param ? "homography" : o->transform);
    if (!o->stage1.empty()) data = make_refinement_set(data, load_checkpoint(o->stage1));
    m.config = {{"data", o->data},     {"out", o->out},           {"transform", o->transform},
                {"stage1", o->stage1}, {"extractor", to_json(ext)}, {"regressor", to_json(reg)},
                {"train", to_json(cfg)}, {"samples", data.size()}};
    m.seed = cfg.seed;
    const auto ckpt = train(data, cfg, ext, reg, [&](int epoch, double loss) {
      ctx.err << "train: epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << loss << "\n";
    });
    save_checkpoint(o->out, ckpt);
    m.artifacts = {{"checkpoint", o->out}};
    m.write(o->out + ".manifest.json");
    ctx.out << json{{"checkpoint", o->out}, {"loss_trace", ckpt.loss_trace}}.dump() << "\n";
  };
}

Action add_eval(CLI::App& app) {
  auto* cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset with PCK");
  struct Opts {
    std::string data, ckpt, ckpt2, manifest;
    double alpha = 0.1;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--data", o->data, "Dataset directory")->required();
  cmd->add_option("--ckpt", o->ckpt, "Checkpoint (stage 1)")->required();
  cmd->add_option("--ckpt2", o->ckpt2, "Optional stage-2 checkpoint");
  cmd->add_option("--alpha", o->alpha, "PCK threshold as a fraction of max(h, w)");
  cmd->add_option("--manifest", o->manifest, "Run manifest path (default: <ckpt>.eval.manifest.json)");
  return [cmd, o](Context& ctx) {
    if (!*cmd) return;
    Manifest m{"eval"};
    m.config = {{"data", o->data}, {"ckpt", o->ckpt}, {"ckpt2", o->ckpt2}, {"alpha", o->alpha}};
    const auto data = read_nonempty_dataset(o->data);
    const auto c1 = load_checkpoint(o->ckpt);
    m.seed = c1.train.seed;
    PCKResult res;
    if (o->ckpt2.empty()) {
      res = evaluate_model(data, c1, o->alpha);
    } else {
      const auto c2 = load_checkpoint(o->ckpt2);
      res = evaluate_model(data, c1, c2, o->alpha);
    }
    ctx.err << "eval: pck@" << o->alpha << " = " << res.pck << " over " << data.size() << " samples ("
            << res.failures << " failures)\n";
    const std::string mpath = o->manifest.empty() ? o->ckpt + ".eval.manifest.json" : o->manifest;
    m.artifacts = {{"manifest", mpath}};
    m.config["result"] = {{"pck", res.pck}, {"failures", res.failures}};
    m.write(mpath);
    ctx.out << to_json(res).dump() << "\n";
  };
}

Action add_warp(CLI::App& app) {
  auto* cmd = app.add_subcommand("warp", "Inverse-warp an image by explicit transform parameters");
  struct Opts {
    std::string image, params, out;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--image", o->image, "Input PNG")->required();
  cmd->add_option("--params", o->params, "Comma-separated parameters (6 affine, 9 homography, 18 tps)")
      ->required();
  cmd->add_option("--out", o->out, "Output PNG")->required();
  return [cmd, o](Context& ctx) {
    if (!*cmd) return;
    Manifest m{"warp"};
    const auto t = params_from_list(parse_list<double>(o->params, "parameter"));
    m.config = {{"image", o->image}, {"out", o->out}, {"transform", params_json(t)}};
    const Image img = read_png(o->image);
    write_png(o->out, warp_image(img, t));
    m.artifacts = {{"image", o->out}};
    m.write(o->out + ".manifest.json");
    ctx.err << "warp: wrote " << o->out << "\n";
    ctx.out << json{{"out", o->out}, {"transform", params_json(t)}}.dump() << "\n";
  };
}

Action add_match(CLI::App& app) {
  auto* cmd = app.add_subcommand("match", "Estimate the transform aligning a source image to a target");
  struct Opts {
    std::string source, target, ckpt, ckpt2, out, dump;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--source", o->source, "Source PNG")->required();
  cmd->add_option("--target", o->target, "Target PNG")->required();
  cmd->add_option("--ckpt", o->ckpt, "Checkpoint (stage 1)")->required();
  cmd->add_option("--ckpt2", o->ckpt2, "Optional stage-2 checkpoint");
  cmd->add_option("--out", o->out, "Warped source PNG")->required();
  cmd->add_option("--dump-transform", o->dump, "Write estimated parameters as JSON");
  return [cmd, o](Context& ctx) {
    if (!*cmd) return;
    Manifest m{"match"};
    m.config = {{"source", o->source}, {"target", o->target}, {"ckpt", o->ckpt}, {"ckpt2", o->ckpt2}};
    const Image src = read_png(o->source), tgt = read_png(o->target);
    const auto c1 = load_checkpoint(o->ckpt);
    m.seed = c1.train.seed;
    json report;
    Image warped;
    if (o->ckpt2.empty()) {
      const auto t = forward_pipeline(src, tgt, c1);
      warped = warp_image(src, t);
      report = {{"first", params_json(t)}};
    } else {
      const auto c2 = load_checkpoint(o->ckpt2);
      const auto res = two_stage_match(src, tgt, c1, c2);
      std::vector<Point2> pixels;
      pixels.reserve(static_cast<std::size_t>(tgt.height) * tgt.width);
      for (int r = 0; r < tgt.height; ++r) {
        for (int c = 0; c < tgt.width; ++c) pixels.push_back(pixel_location(r, c, tgt.height, tgt.width));
      }
      warped = Image(tgt.height, tgt.width, src.channels);
      warped.data = sample_bilinear(src, res.map(pixels, Singularity::Clamp));
      report = {{"first", params_json(res.first)}, {"second", params_json(res.second)}};
    }
    write_png(o->out, warped);
    m.artifacts = {{"image", o->out}};
    if (!o->dump.empty()) {
      std::ofstream(o->dump) << report.dump(2) << "\n";
      m.artifacts["transform"] = o->dump;
    }
    m.config["result"] = report;
    m.write(o->out + ".manifest.json");
    ctx.err << "match: wrote " << o->out << "\n";
    ctx.out << report.dump() << "\n";
  };
}

Action add_ablate(CLI::App& app) {
  auto* cmd = app.add_subcommand("ablate", "Train and score the homography ablation variants");
  struct Opts {
    std::string data, seeds = "0,1,2,3,4", out, channels = "16,32,16";
    double test_fraction = 0.1, alpha = 0.1;
    int reg_channels = 16;
    TrainConfig train;
  };
  auto o = std::make_shared<Opts>();
  o->train.epochs = 10;
  cmd->add_option("--data", o->data, "Dataset directory")->required();
  cmd->add_option("--seeds", o->seeds, "Comma-separated seeds (at least 3)");
  cmd->add_option("--out", o->out, "Report directory")->required();
  cmd->add_option("--test-fraction", o->test_fraction, "Trailing fraction held out for scoring")
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--alpha", o->alpha, "PCK threshold as a fraction of max(h, w)");
  cmd->add_option("--epochs", o->train.epochs, "Training epochs per run")->check(CLI::NonNegativeNumber);
  cmd->add_option("--lr", o->train.learning_rate, "Adam learning rate");
  cmd->add_option("--batch", o->train.batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
  cmd->add_option("--channels", o->channels, "Extractor channels per stride-2 stage");
  cmd->add_option("--reg-channels", o->reg_channels, "Regressor conv channels")->check(CLI::PositiveNumber);
  return [cmd, o](Context& ctx) {
    if (!*cmd) return;
    Manifest m{"ablate"};
    const auto seeds = parse_list<std::uint64_t>(o->seeds, "seed");
    const auto data = read_nonempty_dataset(o->data);
    ExtractorSpec ext;
    ext.channels = parse_list<int>(o->channels, "channel");
    ext.input_size = data.front().source.height;
    RegressorSpec reg;
    reg.conv_channels = o->reg_channels;
    m.config = {{"data", o->data},        {"seeds", seeds},          {"out", o->out},
                {"test_fraction", o->test_fraction}, {"alpha", o->alpha},
                {"extractor", to_json(ext)}, {"regressor", to_json(reg)}, {"train", to_json(o->train)}};
    m.seed = seeds.front();
    const auto split = split_dataset(data, o->test_fraction);
    ctx.err << "ablate: " << split.train.size() << " train / " << split.test.size() << " test samples\n";
    const auto report = run_ablation(split, o->train, ext, reg, seeds, o->alpha,
                                     [&](const AblationVariant& v, std::uint64_t seed, const ModelCheckpoint&) {
                                       ctx.err << "ablate: trained " << v.label << " seed " << seed << "\n";
                                     });
    write_ablation_report(o->out, report);
    m.artifacts = {{"csv", (fs::path(o->out) / "ablation.csv").string()},
                   {"json", (fs::path(o->out) / "ablation.json").string()}};
    m.write(fs::path(o->out) / "run_manifest.json");
    ctx.out << json{{"median_pck", report.median_pck}}.dump() << "\n";
  };
}

Action add_gradcheck(CLI::App& app, int& status) {
  auto* cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
  struct Opts {
    std::string module = "all", manifest = "gradcheck.manifest.json";
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--module", o->module, "Module to check")
      ->check(CLI::IsMember({"all", "matching", "loss", "model", "warp"}));
  cmd->add_option("--manifest", o->manifest, "Run manifest path");
  return [cmd, o, &status](Context& ctx) {
    if (!*cmd) return;
    Manifest m{"gradcheck"};
    m.config = {{"module", o->module}};
    const auto results = gradcheck::run(o->module);
    json table = json::array();
    bool ok = true;
    for (const auto& r : results) {
      table.push_back({{"module", r.module},
                       {"check", r.name},
                       {"max_rel_error", r.max_rel_error},
                       {"tolerance", r.tolerance},
                       {"passed", r.passed()}});
      ok = ok && r.passed();
      ctx.err << "gradcheck: " << std::left << std::setw(40) << r.name << " " << std::scientific
              << std::setprecision(3) << r.max_rel_error << (r.passed() ? "  ok" : "  FAIL") << "\n"
              << std::defaultfloat;
    }
    m.config["passed"] = ok;
    m.artifacts = {{"manifest", o->manifest}};
    m.write(o->manifest);
    ctx.out << json{{"passed", ok}, {"checks", table}}.dump() << "\n";
    if (!ok) status = static_cast<int>(ErrorCategory::Numerical);
  };
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"geomatch: geometric matching toolkit on synthetic image pairs", "geomatch"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", std::string(kVersion));
  int status = 0;
  std::vector<Action> actions{add_gen_corpus(app), add_gen_data(app), add_train(app),
                              add_eval(app),       add_warp(app),     add_match(app),
                              add_ablate(app),     add_gradcheck(app, status)};
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return static_cast<int>(ErrorCategory::Usage);
  }
  Context ctx{out, err};
  try {
    for (auto& a : actions) a(ctx);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorCategory::Data);
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorCategory::Data);
  }
  return status;
}

}  // namespace geomatch::cli
