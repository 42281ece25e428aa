#include "kanlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

namespace kanlab {

void TrainConfig::validate() const {
  if (learning_rate <= 0.0 || weight_decay < 0.0)
    throw ConfigError("train config: learning rate must be positive");
  if (patience <= 0 || max_epochs <= 0 || batch_size <= 0)
    throw ConfigError("train config: patience/max_epochs/batch_size must be positive");
  if (patience >= max_epochs)
    throw ConfigError("train config: patience must be below max_epochs");
}

void adam_step(std::vector<Param>& params, AdamState& state,
               const TrainConfig& config) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto n = std::size_t(params[i].value.numel());
      state.m[i].assign(n, 0.0);
      state.v[i].assign(n, 0.0);
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto values = p.value.mutable_data();
    if (!p.value.has_grad())
      continue;  // parameter unused by this forward graph
    auto grads = p.value.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != values.size())
      throw DimensionError("adam: state shape mismatch for " + p.name);
    for (std::size_t j = 0; j < values.size(); ++j) {
      double g = grads[j];
      if (!std::isfinite(g))
        throw NumericError("adam: non-finite gradient in " + p.name);
      g += config.weight_decay * values[j];
      m[j] = beta1 * m[j] + (1.0 - beta1) * g;
      v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      values[j] -= config.learning_rate * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

std::array<double, 2> ce_class_weights(std::array<std::int64_t, 2> counts) {
  if (counts[0] <= 0 || counts[1] <= 0)
    throw ConfigError("weighted cross-entropy: both class counts must be positive");
  const double r0 = 1.0 / double(counts[0]);
  const double r1 = 1.0 / double(counts[1]);
  const double mean = 0.5 * (r0 + r1);
  return {r0 / mean, r1 / mean};
}

Tensor weighted_ce_loss(const Tensor& logits, std::span<const int> labels,
                        std::array<std::int64_t, 2> class_counts) {
  if (logits.rank() != 2 || logits.dim(1) != 2)
    throw DimensionError("weighted_ce_loss: logits must be [batch x 2]");
  const std::int64_t batch = logits.dim(0);
  if (std::int64_t(labels.size()) != batch)
    throw DimensionError("weighted_ce_loss: label count mismatch");
  const auto w = ce_class_weights(class_counts);
  for (int y : labels)
    if (y != 0 && y != 1)
      throw InputError("weighted_ce_loss: labels must be 0 or 1");

  const auto ld = logits.data();
  double weight_total = 0.0;
  double loss_acc = 0.0;
  std::vector<double> softmax(std::size_t(batch) * 2);
  for (std::int64_t i = 0; i < batch; ++i) {
    const double l0 = ld[std::size_t(2 * i)];
    const double l1 = ld[std::size_t(2 * i + 1)];
    const double mx = std::max(l0, l1);
    const double e0 = std::exp(l0 - mx), e1 = std::exp(l1 - mx);
    const double z = e0 + e1;
    softmax[std::size_t(2 * i)] = e0 / z;
    softmax[std::size_t(2 * i + 1)] = e1 / z;
    const double lse = mx + std::log(z);
    const int y = labels[std::size_t(i)];
    const double nll = lse - (y == 0 ? l0 : l1);
    loss_acc += w[std::size_t(y)] * nll;
    weight_total += w[std::size_t(y)];
  }
  Tensor result = Tensor::scalar(loss_acc / weight_total);

  Tensor lc = logits, rc = result;
  std::vector<int> ycopy(labels.begin(), labels.end());
  maybe_record({logits}, result, [=]() mutable {
    if (!lc.tracked()) return;
    const double g = rc.grad()[0];
    auto lg = lc.grad();
    for (std::int64_t i = 0; i < batch; ++i) {
      const int y = ycopy[std::size_t(i)];
      const double wi = w[std::size_t(y)] / weight_total;
      for (int c = 0; c < 2; ++c) {
        const double p = softmax[std::size_t(2 * i + c)];
        lg[std::size_t(2 * i + c)] += g * wi * (p - (c == y ? 1.0 : 0.0));
      }
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Fold plans
// ---------------------------------------------------------------------------

std::string global_subject_id(const DatasetManifest& m,
                              const SubjectRecord& s) {
  return m.dataset_name + "/" + s.subject_id;
}

namespace {

struct GroupInfo {
  std::string gid;  // global group id
  ClassLabel label;
};

std::vector<GroupInfo> collect_groups(const DatasetManifest& m) {
  std::map<std::string, ClassLabel> seen;
  std::vector<std::string> order;
  for (const auto& s : m.subjects) {
    const std::string g = m.dataset_name + "/" + s.group_id;
    if (!seen.count(g)) {
      seen.emplace(g, s.label);
      order.push_back(g);
    }
  }
  std::vector<GroupInfo> out;
  for (const auto& g : order) out.push_back({g, seen.at(g)});
  return out;
}

// Expands group ids back to the subjects they own.
std::vector<std::string> subjects_of_groups(
    const DatasetManifest& m, const std::vector<std::string>& groups) {
  std::vector<std::string> out;
  for (const auto& s : m.subjects) {
    const std::string g = m.dataset_name + "/" + s.group_id;
    if (std::find(groups.begin(), groups.end(), g) != groups.end())
      out.push_back(global_subject_id(m, s));
  }
  return out;
}

// Carves the early-stopping validation groups out of the training groups:
// roughly 10% per class, at least one of each class when the class is
// present, never the whole training set.
void carve_validation(std::vector<GroupInfo>& train_groups,
                      std::vector<GroupInfo>& val_groups, Rng rng) {
  val_groups.clear();
  for (ClassLabel cls : {ClassLabel::control, ClassLabel::pd}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < train_groups.size(); ++i)
      if (train_groups[i].label == cls) idx.push_back(i);
    if (idx.empty()) continue;
    std::size_t take = std::max<std::size_t>(1, (idx.size() + 5) / 10);
    if (take >= idx.size()) take = idx.size() > 1 ? idx.size() - 1 : 0;
    rng.shuffle(idx);
    std::vector<std::size_t> chosen(idx.begin(), idx.begin() + std::ptrdiff_t(take));
    std::sort(chosen.rbegin(), chosen.rend());
    for (std::size_t i : chosen) {
      val_groups.push_back(train_groups[i]);
      train_groups.erase(train_groups.begin() + std::ptrdiff_t(i));
    }
  }
}

}  // namespace

FoldPlan stratified_group_kfold(const DatasetManifest& manifest, int k,
                                std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold: k must be >= 2");
  auto groups = collect_groups(manifest);
  if (int(groups.size()) < k)
    throw ConfigError("kfold: fewer groups than folds");
  Rng rng = Rng(seed).split("stratified_group_kfold");

  // per-class deal onto the least-loaded fold
  std::vector<std::vector<GroupInfo>> folds(static_cast<std::size_t>(k));
  std::vector<std::array<int, 2>> class_load(std::size_t(k), {0, 0});
  for (ClassLabel cls : {ClassLabel::control, ClassLabel::pd}) {
    std::vector<GroupInfo> of_class;
    for (const auto& g : groups)
      if (g.label == cls) of_class.push_back(g);
    rng.shuffle(of_class);
    for (const auto& g : of_class) {
      int best = 0;
      for (int f = 1; f < k; ++f) {
        const auto c = std::size_t(cls == ClassLabel::pd);
        const auto load = [&](int fold) {
          return std::pair<int, int>(
              class_load[std::size_t(fold)][c],
              class_load[std::size_t(fold)][0] + class_load[std::size_t(fold)][1]);
        };
        if (load(f) < load(best)) best = f;
      }
      folds[std::size_t(best)].push_back(g);
      class_load[std::size_t(best)][std::size_t(cls == ClassLabel::pd)] += 1;
    }
  }

  FoldPlan plan;
  plan.protocol = "isolated_cv";
  for (int f = 0; f < k; ++f) {
    std::vector<GroupInfo> train_groups;
    for (int o = 0; o < k; ++o)
      if (o != f)
        train_groups.insert(train_groups.end(), folds[std::size_t(o)].begin(),
                            folds[std::size_t(o)].end());
    std::vector<GroupInfo> val_groups;
    carve_validation(train_groups, val_groups,
                     rng.split("val" + std::to_string(f)));
    Fold fold;
    auto names = [&](const std::vector<GroupInfo>& gs) {
      std::vector<std::string> v;
      for (const auto& g : gs) v.push_back(g.gid);
      return v;
    };
    fold.train_ids = subjects_of_groups(manifest, names(train_groups));
    fold.val_ids = subjects_of_groups(manifest, names(val_groups));
    fold.test_ids = subjects_of_groups(manifest, names(folds[std::size_t(f)]));
    plan.folds.push_back(std::move(fold));
  }
  validate_fold_plan(plan);
  return plan;
}

FoldPlan loocv_plan(const DatasetManifest& manifest, std::uint64_t seed) {
  auto groups = collect_groups(manifest);
  if (groups.size() < 3) throw ConfigError("loocv: needs at least 3 subjects");
  Rng rng = Rng(seed).split("loocv");
  FoldPlan plan;
  plan.protocol = "loocv";
  for (std::size_t i = 0; i < groups.size(); ++i) {
    std::vector<GroupInfo> train_groups;
    for (std::size_t o = 0; o < groups.size(); ++o)
      if (o != i) train_groups.push_back(groups[o]);
    std::vector<GroupInfo> val_groups;
    carve_validation(train_groups, val_groups,
                     rng.split("val" + std::to_string(i)));
    Fold fold;
    auto names = [&](const std::vector<GroupInfo>& gs) {
      std::vector<std::string> v;
      for (const auto& g : gs) v.push_back(g.gid);
      return v;
    };
    fold.train_ids = subjects_of_groups(manifest, names(train_groups));
    fold.val_ids = subjects_of_groups(manifest, names(val_groups));
    fold.test_ids = subjects_of_groups(manifest, {groups[i].gid});
    plan.folds.push_back(std::move(fold));
  }
  validate_fold_plan(plan);
  return plan;
}

FoldPlan holdout_plan(std::span<const DatasetManifest> manifests,
                      std::uint64_t seed) {
  if (manifests.size() != 3)
    throw ConfigError("holdout: exactly 3 datasets required");
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j)
      if (manifests[i].dataset_name == manifests[j].dataset_name)
        throw ConfigError("holdout: dataset names must be distinct");
  Rng rng = Rng(seed).split("holdout");
  FoldPlan plan;
  plan.protocol = "holdout";
  // rotations ordered (A+B -> C), (A+C -> B), (B+C -> A)
  for (int r = 0; r < 3; ++r) {
    const std::size_t test = std::size_t(2 - r);
    std::vector<GroupInfo> train_groups;
    for (std::size_t d = 0; d < 3; ++d) {
      if (d == test) continue;
      auto g = collect_groups(manifests[d]);
      train_groups.insert(train_groups.end(), g.begin(), g.end());
    }
    std::vector<GroupInfo> val_groups;
    carve_validation(train_groups, val_groups,
                     rng.split("val" + std::to_string(r)));
    Fold fold;
    // expand train/val groups dataset by dataset
    auto expand = [&](const std::vector<GroupInfo>& gs) {
      std::vector<std::string> names;
      for (const auto& g : gs) names.push_back(g.gid);
      std::vector<std::string> out;
      for (std::size_t d = 0; d < 3; ++d) {
        if (d == test) continue;
        auto part = subjects_of_groups(manifests[d], names);
        out.insert(out.end(), part.begin(), part.end());
      }
      return out;
    };
    fold.train_ids = expand(train_groups);
    fold.val_ids = expand(val_groups);
    for (const auto& s : manifests[test].subjects)
      fold.test_ids.push_back(global_subject_id(manifests[test], s));
    plan.folds.push_back(std::move(fold));
  }
  validate_fold_plan(plan);
  return plan;
}

void validate_fold_plan(const FoldPlan& plan) {
  for (const auto& f : plan.folds) {
    auto sorted = [](std::vector<std::string> v) {
      std::sort(v.begin(), v.end());
      return v;
    };
    const auto tr = sorted(f.train_ids);
    const auto va = sorted(f.val_ids);
    const auto te = sorted(f.test_ids);
    std::vector<std::string> inter;
    std::set_intersection(tr.begin(), tr.end(), te.begin(), te.end(),
                          std::back_inserter(inter));
    std::set_intersection(va.begin(), va.end(), te.begin(), te.end(),
                          std::back_inserter(inter));
    std::set_intersection(tr.begin(), tr.end(), va.begin(), va.end(),
                          std::back_inserter(inter));
    if (!inter.empty())
      throw Error("fold plan leaks subject " + inter.front());
    if (f.train_ids.empty() || f.test_ids.empty())
      throw Error("fold plan has empty train or test set");
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

Tensor stack_images(std::span<const Sample> samples,
                    std::span<const std::size_t> idx) {
  const Tensor& first = samples[idx[0]].image;
  Shape shape{std::int64_t(idx.size())};
  for (int i = 0; i < first.rank(); ++i) shape.push_back(first.dim(i));
  std::vector<double> data;
  data.reserve(std::size_t(shape_numel(shape)));
  for (std::size_t s : idx) {
    const auto d = samples[s].image.data();
    data.insert(data.end(), d.begin(), d.end());
  }
  return Tensor::from(std::move(shape), std::move(data));
}

double run_eval_loss(Model& model, std::span<const Sample> samples,
                     std::array<std::int64_t, 2> counts, int batch_size) {
  if (samples.empty()) return 0.0;
  const bool graphs = model.config().family == Family::gcn;
  double loss = 0.0, weight = 0.0;
  const auto w = ce_class_weights(counts);
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t b = 0; b < idx.size(); b += std::size_t(batch_size)) {
    const auto e = std::min(idx.size(), b + std::size_t(batch_size));
    std::vector<int> labels;
    Tensor logits;
    if (graphs) {
      std::vector<Tensor> rows;
      for (std::size_t i = b; i < e; ++i) {
        rows.push_back(model.forward_graph(samples[idx[i]].adj,
                                           samples[idx[i]].features, false,
                                           nullptr));
        labels.push_back(samples[idx[i]].label);
      }
      logits = concat_rows(rows);
    } else {
      std::span<const std::size_t> part(idx.data() + b, e - b);
      logits = model.forward_image(stack_images(samples, part), false, nullptr);
      for (std::size_t i = b; i < e; ++i) labels.push_back(samples[idx[i]].label);
    }
    const auto ld = logits.data();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double l0 = ld[2 * i], l1 = ld[2 * i + 1];
      const double mx = std::max(l0, l1);
      const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
      const int y = labels[i];
      loss += w[std::size_t(y)] * (lse - (y == 0 ? l0 : l1));
      weight += w[std::size_t(y)];
    }
  }
  return weight > 0 ? loss / weight : 0.0;
}

}  // namespace

TrainResult train_loop(Model& model, std::span<const Sample> train,
                       std::span<const Sample> val,
                       const TrainConfig& config) {
  config.validate();
  if (train.empty()) throw ConfigError("train_loop: empty training set");
  std::array<std::int64_t, 2> counts{0, 0};
  for (const auto& s : train) counts[std::size_t(s.label)] += 1;
  if (counts[0] == 0 || counts[1] == 0)
    throw ConfigError("train_loop: training set must contain both classes");

  const bool graphs = model.config().family == Family::gcn;
  Rng root(config.seed);
  AdamState adam;
  TrainResult result;
  result.best_val_loss = 1e300;
  std::vector<double> best_snapshot = model.snapshot_parameters();

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng erng = root.split("epoch" + std::to_string(epoch));
    erng.shuffle(order);
    Rng drop_rng = root.split("dropout" + std::to_string(epoch));
    double epoch_loss = 0.0;
    std::int64_t batches = 0;
    for (std::size_t b = 0; b < order.size();
         b += std::size_t(config.batch_size)) {
      const auto e =
          std::min(order.size(), b + std::size_t(config.batch_size));
      std::vector<int> labels;
      for (std::size_t i = b; i < e; ++i)
        labels.push_back(train[order[i]].label);

      Tape tape;
      Tensor logits;
      if (graphs) {
        std::vector<Tensor> rows;
        for (std::size_t i = b; i < e; ++i)
          rows.push_back(model.forward_graph(train[order[i]].adj,
                                             train[order[i]].features, true,
                                             &drop_rng));
        logits = concat_rows(rows);
      } else {
        std::span<const std::size_t> part(order.data() + b, e - b);
        logits =
            model.forward_image(stack_images(train, part), true, &drop_rng);
      }
      Tensor loss = weighted_ce_loss(logits, labels, counts);
      const double lv = loss.value();
      if (!std::isfinite(lv))
        throw NumericError("train_loop: non-finite loss at epoch " +
                           std::to_string(epoch));
      epoch_loss += lv;
      batches += 1;

      auto params = model.parameters();
      for (auto& p : params) p.value.zero_grad();
      tape.backward(loss);
      adam_step(params, adam, config);
    }

    const double val_loss =
        run_eval_loss(model, val, counts, config.batch_size);
    result.history.push_back(
        {epoch, epoch_loss / double(std::max<std::int64_t>(1, batches)),
         val_loss});
    result.epochs_run = epoch;

    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
      best_snapshot = model.snapshot_parameters();
    }
    if (epoch - result.best_epoch >= config.patience) break;
  }

  model.restore_parameters(best_snapshot);
  return result;
}

std::vector<double> predict_scores(Model& model,
                                   std::span<const Sample> samples) {
  std::vector<double> out;
  out.reserve(samples.size());
  const bool graphs = model.config().family == Family::gcn;
  for (const auto& s : samples) {
    Tensor logits;
    if (graphs) {
      logits = model.forward_graph(s.adj, s.features, false, nullptr);
    } else {
      Shape shape{1};
      for (int i = 0; i < s.image.rank(); ++i) shape.push_back(s.image.dim(i));
      logits = model.forward_image(
          Tensor::from(shape, std::vector<double>(s.image.data().begin(),
                                                  s.image.data().end())),
          false, nullptr);
    }
    const double l0 = logits.data()[0], l1 = logits.data()[1];
    const double mx = std::max(l0, l1);
    const double e0 = std::exp(l0 - mx), e1 = std::exp(l1 - mx);
    out.push_back(e1 / (e0 + e1));
  }
  return out;
}

std::vector<SubjectScore> aggregate_by_subject(
    std::span<const Sample> samples, std::span<const double> scores) {
  if (samples.size() != scores.size())
    throw DimensionError("aggregate_by_subject: size mismatch");
  std::vector<SubjectScore> out;
  std::map<std::string, std::size_t> index;
  std::vector<std::int64_t> counts;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& gid = samples[i].subject_gid;
    auto it = index.find(gid);
    if (it == index.end()) {
      index.emplace(gid, out.size());
      out.push_back({gid, samples[i].label, scores[i]});
      counts.push_back(1);
    } else {
      out[it->second].score += scores[i];
      counts[it->second] += 1;
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i].score /= double(counts[i]);
  return out;
}

void write_history_csv(const std::string& path,
                       std::span<const EpochRecord> history) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write history: " + path);
  os << "epoch,train_loss,val_loss\n";
  char buf[128];
  for (const auto& h : history) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", h.epoch, h.train_loss,
                  h.val_loss);
    os << buf;
  }
}

}  // namespace kanlab
