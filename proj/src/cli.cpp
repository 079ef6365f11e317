#include "cubevit/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "cubevit/coep.hpp"
#include "cubevit/errors.hpp"
#include "cubevit/heads.hpp"
#include "cubevit/io.hpp"
#include "cubevit/mae3d.hpp"
#include "cubevit/metrics.hpp"
#include "cubevit/saliency.hpp"
#include "cubevit/synth.hpp"
#include "cubevit/trial.hpp"

namespace cubevit::cli {

namespace fs = std::filesystem;

namespace {

json encoder_defaults(std::size_t depth) {
  return {{"depth", depth}, {"heads", 4}, {"dim", 32}, {"mlp_ratio", 4}, {"tile", 64}};
}

json common(const std::string& command) {
  return {{"out", "runs/" + command}, {"threads", 1}};
}

// ---- typed access -------------------------------------------------------

const json& at(const json& cfg, const std::string& key) {
  const json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw UsageError("missing config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) return *node;
    start = dot + 1;
  }
}

std::size_t get_uint(const json& cfg, const std::string& key) {
  const json& v = at(cfg, key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw UsageError("config key '" + key + "' must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

long long get_int(const json& cfg, const std::string& key) {
  const json& v = at(cfg, key);
  if (!v.is_number_integer()) throw UsageError("config key '" + key + "' must be an integer");
  return v.get<long long>();
}

double get_num(const json& cfg, const std::string& key) {
  const json& v = at(cfg, key);
  if (!v.is_number()) throw UsageError("config key '" + key + "' must be a number");
  return v.get<double>();
}

bool get_bool(const json& cfg, const std::string& key) {
  const json& v = at(cfg, key);
  if (!v.is_boolean()) throw UsageError("config key '" + key + "' must be true or false");
  return v.get<bool>();
}

std::string get_str(const json& cfg, const std::string& key) {
  const json& v = at(cfg, key);
  if (!v.is_string()) throw UsageError("config key '" + key + "' must be a string");
  return v.get<std::string>();
}

template <std::size_t N>
std::array<std::size_t, N> get_extents(const json& cfg, const std::string& key) {
  const json& v = at(cfg, key);
  if (!v.is_array() || v.size() != N) {
    throw UsageError("config key '" + key + "' must be an array of " + std::to_string(N) + " integers");
  }
  std::array<std::size_t, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (!v[i].is_number_integer() || v[i].get<long long>() <= 0) {
      throw UsageError("config key '" + key + "' must hold positive integers");
    }
    out[i] = v[i].get<std::size_t>();
  }
  return out;
}

std::vector<std::size_t> get_uint_list(const json& cfg, const std::string& key) {
  const json& v = at(cfg, key);
  if (!v.is_array()) throw UsageError("config key '" + key + "' must be an array");
  std::vector<std::size_t> out;
  for (const auto& e : v) {
    if (!e.is_number_integer() || e.get<long long>() <= 0) {
      throw UsageError("config key '" + key + "' must hold positive integers");
    }
    out.push_back(e.get<std::size_t>());
  }
  return out;
}

ViTConfig vit_from(const json& cfg, const std::string& key, VitRole role) {
  ViTConfig v;
  v.depth = get_uint(cfg, key + ".depth");
  v.heads = get_uint(cfg, key + ".heads");
  v.dim = get_uint(cfg, key + ".dim");
  v.mlp_ratio = get_uint(cfg, key + ".mlp_ratio");
  v.tile = get_uint(cfg, key + ".tile");
  v.role = role;
  v.validate();
  return v;
}

CubeSpec volume_cube_from(const json& cfg, const std::vector<CohortItem>& items) {
  CubeSpec s;
  s.cube = get_extents<3>(cfg, "cube");
  const Volume& v = items.front().volume;
  s.volume = {v.depth, v.height, v.width};
  s.validate();
  return s;
}

CubeSpec enface_cube_from(const json& cfg, const std::vector<CohortItem>& items) {
  const auto p = get_extents<2>(cfg, "enface_patch");
  CubeSpec s;
  s.cube = {1, p[0], p[1]};
  s.volume = {1, items.front().ir.height, items.front().ir.width};
  s.validate();
  return s;
}

std::vector<CohortItem> load_data(const json& cfg) {
  const fs::path dir = get_str(cfg, "data");
  if (!fs::exists(dir / "cohort.json")) throw UsageError("no cohort found at '" + dir.string() + "'");
  auto items = read_cohort(dir);
  if (items.empty()) throw UsageError("cohort at '" + dir.string() + "' is empty");
  for (const auto& it : items) {
    if (it.volume.depth != items[0].volume.depth || it.volume.height != items[0].volume.height ||
        it.volume.width != items[0].volume.width || it.ir.height != items[0].ir.height ||
        it.ir.width != items[0].ir.width) {
      throw UsageError("cohort items have mixed extents; preprocess to a common size first");
    }
  }
  return items;
}

ParamStore load_params(const json& cfg, const std::string& key) {
  const std::string path = get_str(cfg, key);
  if (path.empty()) return {};
  return load_checkpoint(path).params;
}

json direction_json(const DirectionMetrics& d, const std::vector<std::size_t>& ks) {
  json j;
  for (std::size_t i = 0; i < ks.size(); ++i) j["recall@" + std::to_string(ks[i])] = d.recall_at[i];
  j["mean_rank"] = d.mean_rank;
  return j;
}

struct RunDir {
  fs::path dir;
  std::ofstream log;

  RunDir(const json& cfg, const std::string& command) : dir(get_str(cfg, "out")) {
    fs::create_directories(dir);
    std::ofstream(dir / "config.json") << cfg.dump(2) << '\n';
    log.open(dir / (command + ".log"));
    log << std::setprecision(17);
  }
};

void check_threads(const json& cfg) {
  if (get_uint(cfg, "threads") == 0) throw UsageError("threads must be at least 1");
}

// ---- commands -------------------------------------------------------------

json cmd_synth(const json& cfg, RunDir& run) {
  SyntheticCohortSpec s;
  s.seed = get_uint(cfg, "seed");
  s.count = get_uint(cfg, "count");
  s.volume = get_extents<3>(cfg, "volume");
  s.enface = get_extents<2>(cfg, "enface");
  s.layer_thickness = get_num(cfg, "layer_thickness");
  s.lesion_radius = get_num(cfg, "lesion_radius");
  s.field_of_view_mm = get_num(cfg, "field_of_view_mm");
  s.noise = get_num(cfg, "noise");
  s.target_noise = get_num(cfg, "target_noise");
  s.mirror_os = get_bool(cfg, "mirror_os");
  if (s.count == 0) throw UsageError("count must be positive");
  const auto items = synth_cohort(s);
  write_cohort(run.dir / "cohort", items);

  std::size_t positives = 0, rule_hits = 0, od = 0;
  double growth = 0.0, area = 0.0;
  for (const auto& it : items) {
    positives += static_cast<std::size_t>(it.label);
    rule_hits += hand_rule_label(it.volume) == it.label ? 1 : 0;
    od += it.volume.meta.laterality == Laterality::OD ? 1 : 0;
    growth += it.targets.growth_rate;
    area += it.targets.lesion_area;
    run.log << "item " << it.volume.meta.patient_id << ' ' << to_string(it.volume.meta.laterality) << " label "
            << it.label << " growth " << it.targets.growth_rate << '\n';
  }
  const double n = static_cast<double>(items.size());
  return {{"count", items.size()},
          {"positives", positives},
          {"od_items", od},
          {"hand_rule_accuracy", static_cast<double>(rule_hits) / n},
          {"mean_growth_rate", growth / n},
          {"mean_lesion_area", area / n},
          {"cohort", "cohort"}};
}

json cmd_pretrain(const json& cfg, RunDir& run) {
  const auto items = load_data(cfg);
  std::vector<Volume> vols;
  for (const auto& it : items) vols.push_back(it.volume);
  PretrainConfig pc;
  pc.mae.cube = volume_cube_from(cfg, items);
  pc.mae.encoder = vit_from(cfg, "encoder", VitRole::kEncoder);
  pc.mae.decoder = vit_from(cfg, "decoder", VitRole::kDecoder);
  pc.mae.mask_ratio = get_num(cfg, "mask_ratio");
  pc.mae.loss_on_visible = get_bool(cfg, "loss_on_visible");
  pc.schedule = {get_num(cfg, "lr"), get_uint(cfg, "warmup_epochs"), get_uint(cfg, "epochs"), 0.0};
  pc.adam.beta2 = get_num(cfg, "beta2");
  pc.adam.weight_decay = get_num(cfg, "weight_decay");
  pc.batch_size = get_uint(cfg, "batch_size");
  pc.accumulation = get_uint(cfg, "accumulation");
  pc.max_steps = get_uint(cfg, "max_steps");
  pc.flip_w = get_bool(cfg, "flip_w");
  pc.flip_z = get_bool(cfg, "flip_z");
  pc.seed = get_uint(cfg, "seed");
  const auto res = pretrain(vols, pc, &run.log);
  save_checkpoint(run.dir / "pretrain.ckpt", res.params, &res.optimizer);
  return {{"steps", res.steps},
          {"initial_eval_loss", res.initial_eval_loss},
          {"final_eval_loss", res.final_eval_loss},
          {"relative_reduction", 1.0 - res.final_eval_loss / res.initial_eval_loss},
          {"epoch_losses", res.epoch_losses},
          {"parameters", res.params.total_elements()},
          {"checkpoint", "pretrain.ckpt"}};
}

struct AlignData {
  std::vector<CohortItem> items;
  std::vector<Volume> ir, faf;
  std::vector<AlignSample> samples;
};

AlignData align_data(const json& cfg) {
  AlignData d;
  d.items = load_data(cfg);
  for (const auto& it : d.items) {
    d.ir.push_back(it.ir.as_volume());
    d.faf.push_back(it.faf.as_volume());
  }
  for (std::size_t i = 0; i < d.items.size(); ++i) d.samples.push_back({&d.items[i].volume, &d.ir[i], &d.faf[i]});
  return d;
}

AlignModel align_model(const json& cfg, const AlignData& d) {
  return AlignModel::make(volume_cube_from(cfg, d.items), vit_from(cfg, "encoder", VitRole::kEncoder),
                          enface_cube_from(cfg, d.items), vit_from(cfg, "enface_encoder", VitRole::kEncoder));
}

json retrieval_json(const AlignModel& model, const ParamStore& params, const AlignData& d,
                    const std::vector<std::size_t>& ks, bool faf) {
  const Tensor vol = embed_all_volumes(model, params, d.samples);
  const Tensor enf = embed_all_enface(model, params, d.samples, faf);
  const auto m = retrieval_metrics(cosine_matrix(vol, enf), ks);
  return {{"volume_to_enface", direction_json(m.rows, ks)}, {"enface_to_volume", direction_json(m.cols, ks)}};
}

json cmd_align(const json& cfg, RunDir& run) {
  const AlignData d = align_data(cfg);
  const AlignModel model = align_model(cfg, d);
  AlignConfig ac;
  ac.volume_cube = model.volume_encoder.cube;
  ac.volume_cfg = model.volume_encoder.config;
  ac.enface_cube = model.enface_encoder.cube;
  ac.enface_cfg = model.enface_encoder.config;
  ac.tri_modal = get_bool(cfg, "tri_modal");
  ac.batch_size = get_uint(cfg, "batch_size");
  ac.steps = get_uint(cfg, "steps");
  ac.warmup_steps = get_uint(cfg, "warmup_steps");
  ac.lr = get_num(cfg, "lr");
  ac.adam.weight_decay = get_num(cfg, "weight_decay");
  ac.layer_decay = get_num(cfg, "layer_decay");
  ac.freeze_blocks = get_uint(cfg, "freeze_blocks");
  ac.seed = get_uint(cfg, "seed");
  const ParamStore init = load_params(cfg, "init");
  AlignResult res = align_train(d.samples, ac, init.size() ? &init : nullptr, &run.log);
  quantize_to_float(res.params);
  save_checkpoint(run.dir / "align.ckpt", res.params);
  const auto ks = get_uint_list(cfg, "ks");
  return {{"steps", res.steps},
          {"initial_loss", res.initial_loss},
          {"final_loss", res.losses.empty() ? res.initial_loss : res.losses.back()},
          {"temperature", temperature(res.params)},
          {"train_retrieval", retrieval_json(model, res.params, d, ks, false)},
          {"checkpoint", "align.ckpt"}};
}

json cmd_retrieve(const json& cfg, RunDir& run) {
  const AlignData d = align_data(cfg);
  const AlignModel model = align_model(cfg, d);
  ParamStore params;
  Rng rng(0);
  model.init(params, rng);
  load_into(get_str(cfg, "checkpoint"), params);
  const std::string modality = get_str(cfg, "modality");
  if (modality != "ir" && modality != "faf") throw UsageError("modality must be 'ir' or 'faf'");
  const bool faf = modality == "faf";
  const auto ks = get_uint_list(cfg, "ks");
  const std::size_t lat_k = get_uint(cfg, "laterality_k");

  const Tensor vol = embed_all_volumes(model, params, d.samples);
  const Tensor enf = embed_all_enface(model, params, d.samples, faf);
  const Tensor sim = cosine_matrix(vol, enf);
  const auto m = retrieval_metrics(sim, ks);
  std::vector<Laterality> lat;
  for (const auto& it : d.items) lat.push_back(it.volume.meta.laterality);
  for (std::size_t i = 0; i < m.rows.ranks.size(); ++i) {
    run.log << "query " << i << " rank " << m.rows.ranks[i] << " reverse_rank " << m.cols.ranks[i] << '\n';
  }
  json out = {{"items", d.items.size()},
              {"modality", modality},
              {"volume_to_enface", direction_json(m.rows, ks)},
              {"enface_to_volume", direction_json(m.cols, ks)}};
  out["laterality_acc@" + std::to_string(lat_k)] = laterality_accuracy(sim, lat, lat_k);
  return out;
}

FinetuneConfig finetune_config(const json& cfg, const std::vector<CohortItem>& items) {
  FinetuneConfig fc;
  fc.cube = volume_cube_from(cfg, items);
  fc.encoder = vit_from(cfg, "encoder", VitRole::kEncoder);
  fc.mode = parse_input_mode(get_str(cfg, "mode"));
  fc.task = parse_task_kind(get_str(cfg, "task"));
  if (fc.task == TaskKind::kMultiLabel) throw UsageError("the synthetic cohort carries one binary label; use binary");
  fc.classes = 2;
  fc.epochs = get_uint(cfg, "epochs");
  fc.batch_size = get_uint(cfg, "batch_size");
  fc.lr = get_num(cfg, "lr");
  fc.layer_decay = get_num(cfg, "layer_decay");
  fc.label_smoothing = get_num(cfg, "label_smoothing");
  fc.dropout = get_num(cfg, "dropout");
  fc.aux_weight = get_num(cfg, "aux_weight");
  fc.adam.weight_decay = get_num(cfg, "weight_decay");
  fc.folds = get_uint(cfg, "folds");
  fc.val_fraction = get_num(cfg, "val_fraction");
  fc.seed = get_uint(cfg, "seed");
  fc.validate();
  return fc;
}

std::vector<LabeledSample> labeled(const std::vector<CohortItem>& items) {
  std::vector<LabeledSample> out;
  for (const auto& it : items) out.push_back({&it.volume, {it.label}, it.targets});
  return out;
}

json cmd_finetune(const json& cfg, RunDir& run) {
  const auto items = load_data(cfg);
  const FinetuneConfig fc = finetune_config(cfg, items);
  const auto data = labeled(items);
  const ParamStore init = load_params(cfg, "init");
  const FinetuneResult res = finetune(data, fc, init.size() ? &init : nullptr, &run.log);
  for (std::size_t f = 0; f < res.model.folds.size(); ++f) {
    save_checkpoint(run.dir / (f == 0 ? std::string("finetune.ckpt") : "fold" + std::to_string(f) + ".ckpt"),
                    res.model.folds[f]);
  }
  std::vector<const Volume*> vols;
  for (const auto& s : data) vols.push_back(s.volume);
  const EpochMetrics all = score_predictions(fc, res.model.predict(vols), data);

  json history = json::array();
  for (const auto& m : res.history) {
    json h = {{"fold", m.fold}, {"epoch", m.epoch}, {"split", m.split}};
    if (fc.task == TaskKind::kRegression) {
      h["r2"] = m.r2;
    } else {
      h["auroc"] = m.auroc;
      h["auprc"] = m.auprc;
    }
    history.push_back(h);
  }
  json out = {{"folds", fc.folds}, {"best_epochs", res.best_epochs}, {"history", history}};
  if (fc.task == TaskKind::kRegression) {
    out["ensemble_all"] = {{"r2", all.r2}};
  } else {
    out["ensemble_all"] = {{"auroc", all.auroc}, {"auprc", all.auprc}};
  }
  return out;
}

json cmd_saliency(const json& cfg, RunDir& run) {
  const auto items = load_data(cfg);
  json fcfg = cfg;
  fcfg["mode"] = "volume";
  FinetuneConfig fc = finetune_config(fcfg, items);
  const FinetuneModel model(fc);
  ParamStore params;
  Rng rng(0);
  model.init(params, rng);
  load_into(get_str(cfg, "checkpoint"), params);
  const std::size_t item = get_uint(cfg, "item");
  if (item >= items.size()) throw UsageError("item index out of range");
  const long long block = get_int(cfg, "block");
  std::optional<std::size_t> b;
  if (block >= 0) b = static_cast<std::size_t>(block);
  const SaliencyMap map = gradcam_saliency(model, params, items[item].volume, get_uint(cfg, "target"), b);
  auto size = get_extents<2>(cfg, "slow_scan_size");
  const auto views = slice_views(map, model.encoder().cube);
  const Tensor slow = slow_scan_view(map, size[0], size[1]);
  export_saliency(run.dir / "saliency", map, views, slow);
  std::size_t peak = 0;
  for (std::size_t i = 0; i < map.values.size(); ++i)
    if (map.values[i] > map.values[peak]) peak = i;
  const auto pos = token_position(map.grid, peak);
  run.log << "grid " << map.grid[0] << ' ' << map.grid[1] << ' ' << map.grid[2] << " peak " << pos[0] << ' '
          << pos[1] << ' ' << pos[2] << '\n';
  return {{"item", item},
          {"label", items[item].label},
          {"grid", map.grid},
          {"all_zero", map.all_zero},
          {"peak_cube", pos},
          {"slices", views.size()},
          {"index", "saliency/index.json"}};
}

json cmd_essi(const json& cfg, RunDir& run, std::ostream& out) {
  const double n = get_num(cfg, "n");
  const bool squared = get_bool(cfg, "squared");
  const json& models = at(cfg, "models");
  if (!models.is_array() || models.empty()) throw UsageError("config key 'models' must list at least one model");
  struct Row {
    std::string name;
    double r_avg, essi, eff_n;
  };
  std::vector<Row> rows;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const std::string key = "models." + std::to_string(i);
    if (!models[i].is_object() || !models[i].contains("name") || !models[i].contains("control") ||
        !models[i].contains("treatment") || !models[i]["control"].is_number() ||
        !models[i]["treatment"].is_number()) {
      throw UsageError("config key '" + key + "' needs name, control and treatment");
    }
    const double c = models[i]["control"].get<double>(), t = models[i]["treatment"].get<double>();
    const ArmCorrelations arms = squared ? ArmCorrelations::from_r2(c, t) : ArmCorrelations{c, t};
    const double r = arms.average();
    rows.push_back({models[i]["name"].get<std::string>(), r, essi(arms), effective_n(n, r)});
  }
  json result = {{"n", n}, {"models", json::array()}, {"pairwise", json::array()}};
  out << std::fixed << std::setprecision(1);
  out << "model r_avg essi_percent effective_n gain_vs_unadjusted\n";
  for (const auto& r : rows) {
    const double gain = recruitment_diff(n, r.r_avg, 0.0);
    result["models"].push_back(
        {{"name", r.name}, {"r_avg", r.r_avg}, {"essi_percent", r.essi}, {"effective_n", r.eff_n}, {"gain", gain}});
    out << r.name << ' ' << std::setprecision(4) << r.r_avg << std::setprecision(1) << ' ' << r.essi << ' '
        << std::llround(r.eff_n) << ' ' << std::llround(gain) << '\n';
    run.log << r.name << " r_avg " << r.r_avg << " essi " << r.essi << " effective_n " << r.eff_n << '\n';
  }
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows.size(); ++j) {
      if (i == j || rows[i].r_avg < rows[j].r_avg || (rows[i].r_avg == rows[j].r_avg && i > j)) continue;
      const double diff = recruitment_diff(n, rows[i].r_avg, rows[j].r_avg);
      result["pairwise"].push_back({{"better", rows[i].name}, {"worse", rows[j].name}, {"difference", diff}});
      out << rows[i].name << " vs " << rows[j].name << ' ' << std::llround(diff) << '\n';
    }
  out << std::defaultfloat << std::setprecision(6);
  return result;
}

json cmd_simulate(const json& cfg, RunDir& run) {
  TrialSimConfig sc;
  sc.per_arm = get_uint(cfg, "per_arm");
  sc.correlation = get_num(cfg, "correlation");
  sc.effect = get_num(cfg, "effect");
  sc.reps = get_uint(cfg, "reps");
  sc.seed = get_uint(cfg, "seed");
  const auto r = simulate_trials(sc);
  run.log << "ci_width_ratio " << r.ci_width_ratio << " expected " << r.expected_ratio << '\n';
  return {{"mean_effect", r.mean_effect},
          {"effect_mc_se", r.effect_mc_se},
          {"ci_width_ratio", r.ci_width_ratio},
          {"expected_ratio", r.expected_ratio},
          {"realized_essi_percent", r.realized_essi},
          {"empirical_essi_percent", r.empirical_essi},
          {"formula_essi_percent", r.formula_essi}};
}

// ---- merging --------------------------------------------------------------

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void overlay(json& base, const json& patch, const std::string& path) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw UsageError("unknown config key '" + key + "'");
    json& dst = base[it.key()];
    if (dst.is_object() && it->is_object()) {
      overlay(dst, *it, key);
    } else if (!same_kind(dst, *it)) {
      throw UsageError("config key '" + key + "' expects a " + std::string(dst.type_name()) + ", got " +
                       std::string(it->type_name()));
    } else {
      dst = *it;
    }
  }
}

}  // namespace

std::vector<std::string> commands() {
  return {"synth", "pretrain", "align", "finetune", "retrieve", "saliency", "essi", "simulate-trial"};
}

json default_config(const std::string& command) {
  json c = common(command);
  const json cube = {3, 8, 8};
  if (command == "synth") {
    c.update({{"seed", 0},
              {"count", 64},
              {"volume", {6, 32, 32}},
              {"enface", {32, 32}},
              {"layer_thickness", 1.5},
              {"lesion_radius", 0.18},
              {"field_of_view_mm", 6.0},
              {"noise", 0.02},
              {"target_noise", 0.1},
              {"mirror_os", true}});
  } else if (command == "pretrain") {
    c.update({{"seed", 0},
              {"data", "runs/synth/cohort"},
              {"cube", cube},
              {"encoder", encoder_defaults(2)},
              {"decoder", encoder_defaults(1)},
              {"mask_ratio", 0.9},
              {"loss_on_visible", false},
              {"batch_size", 4},
              {"accumulation", 1},
              {"epochs", 10},
              {"warmup_epochs", 1},
              {"lr", 1e-3},
              {"beta2", 0.95},
              {"weight_decay", 0.05},
              {"max_steps", 0},
              {"flip_w", true},
              {"flip_z", false}});
  } else if (command == "align" || command == "retrieve") {
    c.update({{"seed", 0},
              {"data", "runs/synth/cohort"},
              {"cube", cube},
              {"encoder", encoder_defaults(2)},
              {"enface_patch", {8, 8}},
              {"enface_encoder", encoder_defaults(2)},
              {"ks", {1, 5, 10}}});
    if (command == "align") {
      c.update({{"init", ""},
                {"tri_modal", false},
                {"batch_size", 32},
                {"steps", 200},
                {"warmup_steps", 20},
                {"lr", 1e-3},
                {"weight_decay", 0.05},
                {"layer_decay", 1.0},
                {"freeze_blocks", 0}});
    } else {
      c.update({{"checkpoint", "runs/align/align.ckpt"}, {"laterality_k", 1}, {"modality", "ir"}});
    }
  } else if (command == "finetune" || command == "saliency") {
    c.update({{"seed", 0},
              {"data", "runs/synth/cohort"},
              {"cube", cube},
              {"encoder", encoder_defaults(2)},
              {"task", "binary"},
              {"epochs", 10},
              {"batch_size", 1},
              {"lr", 5e-3},
              {"layer_decay", 0.65},
              {"label_smoothing", 0.1},
              {"dropout", 0.5},
              {"aux_weight", 0.1},
              {"weight_decay", 0.05},
              {"folds", 1},
              {"val_fraction", 0.25}});
    if (command == "finetune") {
      c.update({{"init", ""}, {"mode", "volume"}});
    } else {
      c.update({{"checkpoint", "runs/finetune/finetune.ckpt"},
                {"item", 0},
                {"target", 1},
                {"block", -1},
                {"slow_scan_size", {6, 32}}});
    }
  } else if (command == "essi") {
    c.update({{"n", 440},
              {"squared", true},
              {"models", json::array({{{"name", "model_a"}, {"control", 0.36}, {"treatment", 0.40}},
                                      {{"name", "model_b"}, {"control", 0.29}, {"treatment", 0.33}}})}});
  } else if (command == "simulate-trial") {
    c.update({{"seed", 0}, {"per_arm", 400}, {"correlation", 0.7}, {"effect", 0.5}, {"reps", 1000}});
  } else {
    throw UsageError("unknown command '" + command + "'");
  }
  return c;
}

json merge_config(const json& defaults, const json& file, const std::vector<std::string>& overrides) {
  json cfg = defaults;
  if (!file.is_null()) {
    if (!file.is_object()) throw UsageError("config file must hold a JSON object");
    overlay(cfg, file, "");
  }
  if (overrides.size() % 2 != 0) throw UsageError("override '" + overrides.back() + "' has no value");
  for (std::size_t i = 0; i < overrides.size(); i += 2) {
    const std::string& flag = overrides[i];
    if (flag.rfind("--", 0) != 0 || flag.size() == 2) throw UsageError("expected --key, got '" + flag + "'");
    const std::string key = flag.substr(2);
    const std::string& raw = overrides[i + 1];
    // Build the nested patch for the dotted key.
    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
    const json* target = &cfg;
    for (const auto& p : parts) {
      if (!target->is_object() || !target->contains(p)) throw UsageError("unknown config key '" + key + "'");
      target = &(*target)[p];
    }
    json value;
    if (target->is_string()) {
      value = raw;
    } else {
      try {
        value = json::parse(raw);
      } catch (const json::parse_error&) {
        throw UsageError("config key '" + key + "' cannot parse value '" + raw + "'");
      }
    }
    json patch = value;
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    overlay(cfg, patch, "");
  }
  return cfg;
}

json run_command(const std::string& command, const json& config, std::ostream& out) {
  check_threads(config);
  RunDir run(config, command);
  json metrics;
  if (command == "synth") metrics = cmd_synth(config, run);
  else if (command == "pretrain") metrics = cmd_pretrain(config, run);
  else if (command == "align") metrics = cmd_align(config, run);
  else if (command == "finetune") metrics = cmd_finetune(config, run);
  else if (command == "retrieve") metrics = cmd_retrieve(config, run);
  else if (command == "saliency") metrics = cmd_saliency(config, run);
  else if (command == "essi") metrics = cmd_essi(config, run, out);
  else if (command == "simulate-trial") metrics = cmd_simulate(config, run);
  else throw UsageError("unknown command '" + command + "'");
  std::ofstream(run.dir / "metrics.json") << metrics.dump(2) << '\n';
  return metrics;
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cube-token ViT pipelines for volumetric retinal imaging"};
  app.require_subcommand(1);
  std::map<std::string, std::string> config_paths;
  for (const auto& name : commands()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " pipeline");
    sub->allow_extras();
    sub->add_option("--config", config_paths[name], "JSON config file");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }
  try {
    const CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    json file;
    if (!config_paths[name].empty()) {
      std::ifstream in(config_paths[name]);
      if (!in) throw UsageError("cannot open config '" + config_paths[name] + "'");
      try {
        file = json::parse(in);
      } catch (const json::parse_error& e) {
        throw UsageError("config '" + config_paths[name] + "' is not valid JSON: " + e.what());
      }
    }
    const json cfg = merge_config(default_config(name), file, sub->remaining());
    const json metrics = run_command(name, cfg, out);
    if (name != "essi") out << metrics.dump(2) << '\n';
    return kExitOk;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kExitData;
  } catch (const DegenerateInputError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const nlohmann::json::exception& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitOther;
  }
}

}  // namespace cubevit::cli
