#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "qdwi/error.hpp"
#include "qdwi/evaluation.hpp"
#include "qdwi/phantom.hpp"
#include "qdwi/training.hpp"

namespace qdwi::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Wraps file errors with the offending path.
VolumeStack load_volume(const fs::path& p) {
  if (!fs::exists(p)) throw Error("missing file: " + p.string());
  try {
    return read_volume(p);
  } catch (const FormatError& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

/// "bvec,bval" or a prefix P naming P.bvec and P.bval.
std::pair<fs::path, fs::path> table_paths(const std::string& spec) {
  const auto comma = spec.find(',');
  if (comma == std::string::npos) return {spec + ".bvec", spec + ".bval"};
  return {spec.substr(0, comma), spec.substr(comma + 1)};
}

GradientTable load_table(const std::string& spec) {
  const auto [bvec, bval] = table_paths(spec);
  for (const auto& p : {bvec, bval})
    if (!fs::exists(p)) throw Error("missing file: " + p.string());
  return read_gradient_table(bvec, bval);
}

BVector parse_direction(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      v.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw CLI::ValidationError("direction", "non-numeric component '" + tok + "'");
    }
  }
  if (v.size() != 3) throw CLI::ValidationError("direction", "expected x,y,z");
  BVector b{v[0], v[1], v[2]};
  const double n = b.norm();
  if (!(n > 0)) throw CLI::ValidationError("direction", "zero direction");
  return {b.x / n, b.y / n, b.z / n};
}

Synthesizer load_synthesizer(const fs::path& ckpt) {
  if (!fs::exists(ckpt)) throw Error("missing file: " + ckpt.string());
  Checkpoint ck = load_checkpoint(ckpt);
  return Synthesizer{ck.config.generator, std::move(ck.state.gen), ck.max_bvalue};
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  if (!f) throw Error("cannot write " + p.string());
  f << text;
  if (!f) throw Error("write failed for " + p.string());
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

VolumeStack mask_volume(const PhantomSubject& s) {
  VolumeStack m(s.structural.dims(), s.structural.voxel_size());
  std::vector<float> v(s.mask.begin(), s.mask.end());
  m.add_channel("mask", std::move(v));
  return m;
}

// ---- verbs ----

struct SimulateArgs {
  std::string spec, table, out;
  std::uint64_t seed = 0;
  double downsample_rate = -1;
};

void simulate(const SimulateArgs& a, std::ostream& err) {
  const PhantomSpec spec = read_phantom_spec(a.spec);
  const GradientTable table = load_table(a.table);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_gradient_table(table, out / "table.bvec", out / "table.bval");
  write_text(out / "spec.json", phantom_spec_to_json(spec));
  std::optional<Downsampled> ds;
  if (a.downsample_rate >= 0) {
    ds = downsample(table, a.downsample_rate, a.seed);
    write_gradient_table(ds->kept, out / "kept.bvec", out / "kept.bval");
  }
  for (const auto& s : generate_phantom_dataset(spec, table, a.seed)) {
    const fs::path dir = out / split_name(s.split) / ("subject_" + std::to_string(s.id));
    fs::create_directories(dir);
    write_volume(s.structural, dir / "structural.qvol");
    write_volume(s.dwis, dir / "dwis_raw.qvol");
    const VolumeStack ratios = ratio_volume(s.structural, s.dwis, 1.5);
    write_volume(ratios, dir / "dwis.qvol");
    write_volume(mask_volume(s), dir / "mask.qvol");
    if (ds) {
      VolumeStack kept(ratios.dims(), ratios.voxel_size());
      for (std::size_t k = 0; k < ds->kept_indices.size(); ++k)
        kept.add_channel(dwi_channel_name(k), ratios.channel(ds->kept_indices[k]));
      write_volume(kept, dir / "dwis_kept.qvol");
    }
    err << "simulated " << dir.string() << "\n";
  }
}

struct TrainArgs {
  std::string config, data, out, resume;
  std::optional<std::uint64_t> seed;
  int log_every = 100;
  int checkpoint_every = 0;
};

std::vector<fs::path> subject_dirs(const fs::path& root) {
  std::vector<fs::path> dirs;
  if (!fs::is_directory(root)) return dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

void train_verb(const TrainArgs& a, std::ostream& err) {
  if (!fs::exists(a.config)) throw Error("missing file: " + a.config);
  TrainConfig config = read_train_config(a.config);
  if (a.seed) config.seed = *a.seed;
  const fs::path data(a.data);
  const GradientTable table = load_table((data / "table").string());
  const double max_b = config.max_bvalue > 0 ? config.max_bvalue : table.max_bvalue();

  SampleSet samples(config.generator.input_channels, max_b, config.generator.intensity_cap);
  const auto dirs = subject_dirs(data / "train");
  if (dirs.empty()) throw Error("no training subjects under " + (data / "train").string());
  for (const auto& d : dirs) samples.add_subject(load_volume(d / "structural.qvol"), load_volume(d / "dwis_raw.qvol"), table);
  err << "training on " << dirs.size() << " subjects, " << samples.size() << " samples\n";

  TrainState state = a.resume.empty() ? init_train_state(config) : [&] {
    if (!fs::exists(a.resume)) throw Error("missing file: " + a.resume);
    return load_checkpoint(a.resume, config).state;
  }();

  const fs::path out(a.out);
  ensure_parent(out);
  const fs::path log_path = out.string() + ".losses.csv";
  std::ofstream log(log_path, state.step == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw Error("cannot write " + log_path.string());
  if (state.step == 0) write_loss_header(log);

  const auto start = std::chrono::steady_clock::now();
  train(samples, state, config, [&](const LossRecord& r) {
    write_loss_row(log, r);
    const std::uint64_t done = r.step + 1;
    if (a.log_every > 0 && done % static_cast<std::uint64_t>(a.log_every) == 0) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      err << "step " << done << "/" << config.steps << " g_total " << r.g_total << " g_l1 " << r.g_l1 << " d_loss "
          << r.d_loss << " (" << secs << " s)\n";
    }
    if (a.checkpoint_every > 0 && done % static_cast<std::uint64_t>(a.checkpoint_every) == 0) {
      save_checkpoint(state, config, max_b, out);
    }
  });
  save_checkpoint(state, config, max_b, out);
  err << "wrote " << out.string() << "\n";
}

struct SynthesizeArgs {
  std::string ckpt, structural, bvec, bval, out;
};

void synthesize_verb(const SynthesizeArgs& a) {
  const Synthesizer model = load_synthesizer(a.ckpt);
  const VolumeStack structural = load_volume(a.structural);
  for (const auto& p : {a.bvec, a.bval})
    if (!fs::exists(p)) throw Error("missing file: " + p);
  const GradientTable table = read_gradient_table(a.bvec, a.bval);
  ensure_parent(a.out);
  write_volume(synthesize_volume(model, structural, table.entries()), a.out);
}

struct RestoreArgs {
  std::string ckpt, dwis, kept_table, full_table, out, structural;
};

void restore_verb(const RestoreArgs& a, std::ostream& err) {
  const Synthesizer model = load_synthesizer(a.ckpt);
  const VolumeStack dwis = load_volume(a.dwis);
  const VolumeStack structural = a.structural.empty() ? dwis : load_volume(a.structural);
  const GradientTable kept = load_table(a.kept_table);
  const GradientTable full = load_table(a.full_table);

  // Either one channel per kept entry, or a full stack to pick the kept ones from.
  VolumeStack kept_dwis(dwis.dims(), dwis.voxel_size());
  const auto channels = dwis.dwi_channels();
  if (channels.size() == kept.size()) {
    for (std::size_t k = 0; k < channels.size(); ++k) kept_dwis.add_channel(dwi_channel_name(k), dwis.channel(channels[k]));
  } else if (channels.size() == full.size()) {
    for (std::size_t k = 0; k < kept.size(); ++k) {
      const auto i = find_entry(full, kept[k]);
      if (i < 0) throw FormatError("restore: kept entry " + std::to_string(k) + " is absent from the full table");
      kept_dwis.add_channel(dwi_channel_name(k), dwis.channel(channels[static_cast<std::size_t>(i)]));
    }
  } else {
    throw FormatError("restore: --dwis has " + std::to_string(channels.size()) +
                      " DWI channels, matching neither the kept nor the full table");
  }
  const Restoration r = restore_qspace(kept_dwis, kept, full, model, structural);
  ensure_parent(a.out);
  write_volume(r.dwis, a.out);
  json prov = json::array();
  for (bool s : r.synthetic) prov.push_back(s ? "synthetic" : "real");
  write_text(a.out + ".provenance.json", json{{"channels", prov}}.dump(2) + "\n");
  err << "restored " << full.size() << " channels (" << std::count(r.synthetic.begin(), r.synthetic.end(), true)
      << " synthetic)\n";
}

struct EvaluateArgs {
  std::string pred, ref, mask, json_out, table, maps_dir;
  bool dti = false;
};

json report_json(const MetricReport& r) { return json::parse(metric_report_to_json(r)); }

void evaluate_verb(const EvaluateArgs& a, std::ostream& out) {
  const VolumeStack pred = load_volume(a.pred);
  const VolumeStack ref = load_volume(a.ref);
  const auto mask = mask_from_volume(load_volume(a.mask));
  json result = report_json(compute_metrics(pred, ref, mask));
  if (a.dti) {
    GradientTable table = load_table(a.table);
    auto maps = [&](VolumeStack v, GradientTable t) {
      const bool has_b0 =
          std::any_of(t.entries().begin(), t.entries().end(), [](const GradientEntry& e) { return e.bvalue == 0; });
      if (!has_b0) prepend_b0(v, t, mask);
      const TensorFit fit = dti_fit(v, t, mask);
      return std::pair{fa_map(fit), md_map(fit)};
    };
    const auto [fa_p, md_p] = maps(pred, table);
    const auto [fa_r, md_r] = maps(ref, table);
    MetricOptions fa_opt;
    fa_opt.range = 1.0;
    MetricOptions md_opt;
    md_opt.range = 3e-3;
    result["dti"] = {{"fa", report_json(compute_metrics(fa_p, fa_r, pred.dims(), mask, fa_opt))},
                     {"md", report_json(compute_metrics(md_p, md_r, pred.dims(), mask, md_opt))}};
    if (!a.maps_dir.empty()) {
      fs::create_directories(a.maps_dir);
      auto save = [&](const std::string& name, const std::vector<float>& v) {
        VolumeStack s(pred.dims(), pred.voxel_size());
        s.add_channel(name.substr(name.find('_') + 1) == "fa" ? "FA" : "MD", v);
        write_volume(s, fs::path(a.maps_dir) / (name + ".qvol"));
      };
      save("pred_fa", fa_p);
      save("pred_md", md_p);
      save("ref_fa", fa_r);
      save("ref_md", md_r);
    }
  }
  const std::string text = result.dump(2) + "\n";
  ensure_parent(a.json_out);
  write_text(a.json_out, text);
  out << text;
}

struct AnimateArgs {
  std::string ckpt, structural, from, to, out;
  double bval = 0;
  int frames = 0;
};

void animate_verb(const AnimateArgs& a) {
  const BVector from = parse_direction(a.from), to = parse_direction(a.to);
  const Synthesizer model = load_synthesizer(a.ckpt);
  const VolumeStack structural = load_volume(a.structural);
  fs::create_directories(a.out);
  json listing = json::array();
  for (int i = 0; i < a.frames; ++i) {
    const double t = a.frames == 1 ? 0.0 : static_cast<double>(i) / (a.frames - 1);
    const GradientEntry e{slerp(from, to, t), a.bval};
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03d.qvol", i);
    write_volume(synthesize_volume(model, structural, {e}), fs::path(a.out) / name);
    listing.push_back({{"file", name}, {"t", t}, {"direction", {e.direction.x, e.direction.y, e.direction.z}},
                       {"bvalue", e.bvalue}});
  }
  write_text(fs::path(a.out) / "frames.json", listing.dump(2) + "\n");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"q-space conditioned DWI synthesis"};
  app.name("qdwi");
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Generate a synthetic tensor phantom dataset");
  s->add_option("--spec", sim.spec, "Phantom spec JSON")->required();
  s->add_option("--table", sim.table, "Gradient table as bvec,bval (or a prefix)")->required();
  s->add_option("--seed", sim.seed, "Random seed")->required();
  s->add_option("--out", sim.out, "Output directory")->required();
  s->add_option("--downsample-rate", sim.downsample_rate, "Also write a kept subset at this rate")
      ->check(CLI::Range(0.0, 1.0));

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the generator and discriminator");
  t->add_option("--config", tr.config, "Training config JSON")->required();
  t->add_option("--data", tr.data, "Directory written by simulate")->required();
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--resume", tr.resume, "Continue from this checkpoint");
  t->add_option("--seed", tr.seed, "Override the config seed");
  t->add_option("--log-every", tr.log_every, "Progress interval in steps")->check(CLI::NonNegativeNumber);
  t->add_option("--checkpoint-every", tr.checkpoint_every, "Intermediate checkpoint interval")
      ->check(CLI::NonNegativeNumber);

  SynthesizeArgs sy;
  auto* y = app.add_subcommand("synthesize", "Synthesize DWIs for a gradient table");
  y->add_option("--ckpt", sy.ckpt)->required();
  y->add_option("--structural", sy.structural)->required();
  y->add_option("--bvec", sy.bvec)->required();
  y->add_option("--bval", sy.bval)->required();
  y->add_option("--out", sy.out)->required();

  RestoreArgs re;
  auto* r = app.add_subcommand("restore", "Fill a downsampled acquisition back to the full table");
  r->add_option("--ckpt", re.ckpt)->required();
  r->add_option("--dwis", re.dwis, "Kept (or full) DWI ratio stack")->required();
  r->add_option("--kept-table", re.kept_table, "bvec,bval")->required();
  r->add_option("--full-table", re.full_table, "bvec,bval")->required();
  r->add_option("--out", re.out)->required();
  r->add_option("--structural", re.structural, "Structural stack (default: channels of --dwis)");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Compare two volumes");
  e->add_option("--pred", ev.pred)->required();
  e->add_option("--ref", ev.ref)->required();
  e->add_option("--mask", ev.mask)->required();
  e->add_option("--json", ev.json_out)->required();
  auto* dti = e->add_flag("--dti", ev.dti, "Also compare FA and MD maps");
  e->add_option("--table", ev.table, "bvec,bval of the DWI channels (with --dti)")->needs(dti);
  e->add_option("--maps-dir", ev.maps_dir, "Write FA/MD maps here (with --dti)")->needs(dti);

  AnimateArgs an;
  auto* m = app.add_subcommand("animate", "Frames along a great-circle path of directions");
  m->add_option("--ckpt", an.ckpt)->required();
  m->add_option("--structural", an.structural)->required();
  m->add_option("--from-dir", an.from)->required();
  m->add_option("--to-dir", an.to)->required();
  m->add_option("--bval", an.bval)->required()->check(CLI::NonNegativeNumber);
  m->add_option("--frames", an.frames)->required()->check(CLI::PositiveNumber);
  m->add_option("--out", an.out)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    if (ev.dti && ev.table.empty()) throw CLI::RequiredError("--table (required with --dti)");
    if (!an.from.empty()) parse_direction(an.from), parse_direction(an.to);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    if (s->parsed()) simulate(sim, err);
    else if (t->parsed()) train_verb(tr, err);
    else if (y->parsed()) synthesize_verb(sy);
    else if (r->parsed()) restore_verb(re, err);
    else if (e->parsed()) evaluate_verb(ev, out);
    else if (m->parsed()) animate_verb(an);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kRuntimeError;
  }
  return kOk;
}

}  // namespace qdwi::cli
