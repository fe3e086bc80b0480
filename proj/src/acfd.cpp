#include "dcdnet/acfd.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "dcdnet/errors.hpp"

namespace dcdnet::acfd {

namespace {

ag::Var one_minus(const ag::Var& p) { return ag::add_scalar(ag::mul_scalar(p, -1.0), 1.0); }

}  // namespace

SpatialAttention::SpatialAttention(const std::string& name, Rng& rng) : conv_(name + ".conv", 2, 1, 7, 1, 3, rng) {}

ag::Var SpatialAttention::forward(const ag::Var& x) const {
  return ag::sigmoid(conv_.forward(ag::concat0({ag::channel_mean(x), ag::channel_max(x)})));
}

ChannelAttention::ChannelAttention(const std::string& name, int channels, int reduction, Rng& rng) {
  const int hidden = std::max(1, channels / std::max(1, reduction));
  fc1_ = nn::Linear(name + ".fc1", channels, hidden, rng);
  fc2_ = nn::Linear(name + ".fc2", hidden, channels, rng);
}

ag::Var ChannelAttention::forward(const ag::Var& x) const {
  const int c = x.dim(0);
  auto mlp = [&](const ag::Var& v) { return fc2_.forward(ag::relu(fc1_.forward(ag::reshape(v, {c})))); };
  const ag::Var logits = mlp(ag::spatial_mean(x)) + mlp(ag::spatial_max(x));
  return ag::reshape(ag::sigmoid(logits), {c, 1, 1});
}

nn::ParamList ChannelAttention::parameters() {
  nn::ParamList p = fc1_.parameters();
  nn::append(p, fc2_.parameters());
  return p;
}

SharedBranch::SharedBranch(const ModelConfig& cfg) : c_in_(cfg.c_shared), out_size_(cfg.high_size()) {
  Rng rng(derive_seed(cfg.init_seed, {0x5badULL}));
  block1_ = nn::ConvBlock("shared.block1", cfg.c_shared, cfg.c_shared, 1, rng);
  block2_ = nn::ConvBlock("shared.block2", cfg.c_shared, cfg.c_shared, 1, rng);
  attention_ = SpatialAttention("shared.sa", rng);
  proj_ = nn::Conv2d("shared.proj", cfg.c_shared, cfg.c_f, 1, 1, 0, rng);
}

BranchOutput SharedBranch::forward(const ag::Var& low, const Tensor* gate_override) const {
  if (low.value().rank() != 3 || low.dim(0) != c_in_ || low.dim(1) != 2 * out_size_ || low.dim(2) != 2 * out_size_) {
    throw ShapeError("shared branch expects " + shape_str({c_in_, 2 * out_size_, 2 * out_size_}) + ", got " +
                     shape_str(low.shape()));
  }
  BranchOutput out;
  if (gate_override) {
    require_shape(*gate_override, {1, low.dim(1), low.dim(2)}, "shared gate override");
    out.gate = ag::constant(*gate_override);
  } else {
    out.gate = attention_.forward(low);
  }
  out.gated = out.gate * block2_.forward(block1_.forward(low));
  out.output = proj_.forward(ag::resize_bilinear(out.gated, out_size_, out_size_));
  return out;
}

nn::ParamList SharedBranch::parameters() {
  nn::ParamList p = block1_.parameters();
  nn::append(p, block2_.parameters());
  nn::append(p, attention_.parameters());
  nn::append(p, proj_.parameters());
  return p;
}

PrivateBranch::PrivateBranch(const ModelConfig& cfg) : c_in_(cfg.c_private), size_(cfg.high_size()) {
  Rng rng(derive_seed(cfg.init_seed, {0x9a1eULL}));
  block1_ = nn::ConvBlock("private.block1", cfg.c_private, cfg.c_private, 1, rng);
  block2_ = nn::ConvBlock("private.block2", cfg.c_private, cfg.c_private, 1, rng);
  attention_ = ChannelAttention("private.ca", cfg.c_private, cfg.ca_reduction, rng);
  proj_ = nn::Conv2d("private.proj", cfg.c_private, cfg.c_f, 1, 1, 0, rng);
}

BranchOutput PrivateBranch::forward(const ag::Var& high, const Tensor* gate_override) const {
  if (high.value().rank() != 3 || high.dim(0) != c_in_ || high.dim(1) != size_ || high.dim(2) != size_) {
    throw ShapeError("private branch expects " + shape_str({c_in_, size_, size_}) + ", got " +
                     shape_str(high.shape()));
  }
  BranchOutput out;
  if (gate_override) {
    require_shape(*gate_override, {c_in_, 1, 1}, "private gate override");
    out.gate = ag::constant(*gate_override);
  } else {
    out.gate = attention_.forward(high);
  }
  out.gated = out.gate * block2_.forward(block1_.forward(high));
  out.output = proj_.forward(out.gated);
  return out;
}

nn::ParamList PrivateBranch::parameters() {
  nn::ParamList p = block1_.parameters();
  nn::append(p, block2_.parameters());
  nn::append(p, attention_.parameters());
  nn::append(p, proj_.parameters());
  return p;
}

namespace {
bool g_grl_corrupt = false;
}  // namespace

void set_grl_sign_corruption(bool on) { g_grl_corrupt = on; }
bool grl_sign_corrupted() { return g_grl_corrupt; }

ag::Var grl_forward(const ag::Var& x, const GrlConfig& cfg) {
  if (g_grl_corrupt) return ag::mul_scalar(ag::gradient_reversal(x, cfg.lambda_grl), -1.0) + ag::mul_scalar(ag::detach(x), 2.0);
  return ag::gradient_reversal(x, cfg.lambda_grl);
}

double grl_lambda_at(double lambda_max, long iteration, long total_iterations, double warmup_fraction) {
  const double warm = warmup_fraction * static_cast<double>(total_iterations);
  if (warm <= 0 || static_cast<double>(iteration) >= warm) return lambda_max;
  return lambda_max * std::max(0.0, static_cast<double>(iteration) / warm);
}

Discriminator::Discriminator(const ModelConfig& cfg)
    : channels_(cfg.c_f), output_dim_(cfg.disc_class_head ? 1 + cfg.num_source_classes : 1) {
  Rng rng(derive_seed(cfg.init_seed, {0xd15cULL}));
  fc1_ = nn::Linear("disc.fc1", cfg.c_f, cfg.disc_hidden, rng);
  fc2_ = nn::Linear("disc.fc2", cfg.disc_hidden, output_dim_, rng);
}

ag::Var Discriminator::discriminate(const ag::Var& shared) const {
  if (shared.value().rank() != 3 || shared.dim(0) != channels_) {
    throw ShapeError("discriminator expects " + std::to_string(channels_) + " channels, got " +
                     shape_str(shared.shape()));
  }
  const ag::Var pooled = ag::reshape(ag::spatial_mean(shared), {channels_});
  return fc2_.forward(ag::relu(fc1_.forward(pooled)));
}

nn::ParamList Discriminator::parameters() {
  nn::ParamList p = fc1_.parameters();
  nn::append(p, fc2_.parameters());
  return p;
}

ag::Var domain_probability(const ag::Var& logits) {
  return ag::clamp(ag::sigmoid(ag::slice0(logits, 0, 1)), kAdvEps, 1.0 - kAdvEps);
}

ag::Var adversarial_loss_from_probs(std::span<const ag::Var> d_src, std::span<const ag::Var> d_tgt) {
  if (d_src.empty() || d_tgt.empty()) throw std::invalid_argument("adversarial loss needs nonempty batches");
  ag::Var src_term = ag::log(ag::clamp(d_src[0], kAdvEps, 1.0 - kAdvEps));
  for (std::size_t i = 1; i < d_src.size(); ++i) src_term = src_term + ag::log(ag::clamp(d_src[i], kAdvEps, 1.0 - kAdvEps));
  ag::Var tgt_term = ag::log(one_minus(ag::clamp(d_tgt[0], kAdvEps, 1.0 - kAdvEps)));
  for (std::size_t i = 1; i < d_tgt.size(); ++i) {
    tgt_term = tgt_term + ag::log(one_minus(ag::clamp(d_tgt[i], kAdvEps, 1.0 - kAdvEps)));
  }
  return ag::sum(ag::mul_scalar(src_term, 1.0 / static_cast<double>(d_src.size())) +
                 ag::mul_scalar(tgt_term, 1.0 / static_cast<double>(d_tgt.size())));
}

ag::Var adversarial_loss(std::span<const ag::Var> shared_src, std::span<const ag::Var> shared_pseudo_tgt,
                         const Discriminator& disc, const GrlConfig& grl) {
  if (shared_src.empty() || shared_pseudo_tgt.empty()) {
    throw std::invalid_argument("adversarial loss needs nonempty batches");
  }
  std::vector<ag::Var> d_src, d_tgt;
  for (const ag::Var& s : shared_src) d_src.push_back(domain_probability(disc.discriminate(grl_forward(s, grl))));
  for (const ag::Var& s : shared_pseudo_tgt) d_tgt.push_back(domain_probability(disc.discriminate(grl_forward(s, grl))));
  return adversarial_loss_from_probs(d_src, d_tgt);
}

MemoryBank::MemoryBank(int capacity, int dim) : capacity_(capacity), dim_(dim) {
  if (capacity <= 0 || dim <= 0) throw std::invalid_argument("memory bank needs positive capacity and dim");
}

void MemoryBank::enqueue(std::span<const double> embedding, int class_id) {
  if (static_cast<int>(embedding.size()) != dim_) throw ShapeError("memory bank embedding size mismatch");
  double norm = 0;
  for (double v : embedding) norm += v * v;
  norm = std::sqrt(norm);
  if (!(norm > 0) || !std::isfinite(norm)) return;
  std::vector<double> unit(embedding.begin(), embedding.end());
  for (double& v : unit) v /= norm;
  if (size() == capacity_) entries_.pop_front();
  entries_.emplace_back(std::move(unit), class_id);
}

Tensor MemoryBank::embeddings() const {
  if (entries_.empty()) return Tensor();
  Tensor t({size(), dim_});
  for (int i = 0; i < size(); ++i) std::copy(entries_[i].first.begin(), entries_[i].first.end(), t.data() + i * dim_);
  return t;
}

std::vector<int> MemoryBank::labels() const {
  std::vector<int> l;
  l.reserve(entries_.size());
  for (const auto& e : entries_) l.push_back(e.second);
  return l;
}

ProjectionHead::ProjectionHead(const ModelConfig& cfg) {
  Rng rng(derive_seed(cfg.init_seed, {0x960eULL}));
  fc1_ = nn::Conv2d("proj.fc1", cfg.c_f, cfg.c_f, 1, 1, 0, rng);
  fc2_ = nn::Conv2d("proj.fc2", cfg.c_f, cfg.d_proj, 1, 1, 0, rng);
}

ag::Var ProjectionHead::forward(const ag::Var& priv) const {
  return ag::normalize0(fc2_.forward(ag::relu(fc1_.forward(priv))));
}

nn::ParamList ProjectionHead::parameters() {
  nn::ParamList p = fc1_.parameters();
  nn::append(p, fc2_.parameters());
  return p;
}

ContrastiveResult contrastive_loss_embeddings(const ag::Var& z, std::span<const int> labels, const MemoryBank& bank,
                                              double tau, std::uint64_t seed) {
  if (!(tau > 0)) throw std::invalid_argument("contrastive loss: tau must be positive");
  if (z.value().rank() != 2 || static_cast<std::size_t>(z.dim(0)) != labels.size()) {
    throw ShapeError("contrastive loss: embeddings/labels mismatch");
  }
  const int n = z.dim(0);
  const std::vector<int> bank_labels = bank.labels();
  const int m = bank.size();

  std::map<int, std::vector<int>> batch_rows, bank_rows;
  for (int i = 0; i < n; ++i) batch_rows[labels[i]].push_back(i);
  for (int j = 0; j < m; ++j) bank_rows[bank_labels[j]].push_back(j);

  Rng rng(derive_seed(seed, {0xc0deULL}));
  std::vector<int> kept, positive;
  for (int i = 0; i < n; ++i) {
    const std::vector<int>& same = batch_rows[labels[i]];
    if (same.size() > 1) {
      // Uniform over same-label rows other than i.
      const auto self = static_cast<int>(std::lower_bound(same.begin(), same.end(), i) - same.begin());
      int k = rng.uniform_int(0, static_cast<int>(same.size()) - 2);
      if (k >= self) ++k;
      const int j = same[static_cast<std::size_t>(k)];
      kept.push_back(i);
      positive.push_back(j);
      continue;
    }
    auto it = bank_rows.find(labels[i]);
    if (it != bank_rows.end() && !it->second.empty()) {
      kept.push_back(i);
      positive.push_back(n + it->second[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(it->second.size()) - 1))]);
    }
  }

  ContrastiveResult res;
  res.skipped = n - static_cast<int>(kept.size());
  res.anchors = static_cast<int>(kept.size());
  if (kept.empty()) {
    res.loss = ag::constant(Tensor::scalar(0.0));
    res.no_pair = true;
    return res;
  }
  const Tensor bank_mat = bank.embeddings();
  const ag::Var pool = m > 0 ? ag::concat0({z, ag::constant(bank_mat)}) : z;
  const ag::Var anchors = ag::gather_rows(z, kept);
  const ag::Var positives = ag::gather_rows(pool, positive);
  std::vector<std::uint8_t> neg_mask(kept.size() * static_cast<std::size_t>(m), 0);
  for (std::size_t a = 0; a < kept.size(); ++a) {
    for (int j = 0; j < m; ++j) neg_mask[a * m + j] = bank_labels[j] != labels[kept[a]] ? 1 : 0;
  }
  res.loss = ag::mean(ag::info_nce(anchors, positives, bank_mat, neg_mask, tau));
  return res;
}

ContrastiveResult contrastive_loss(std::span<const ag::Var> priv, std::span<const data::MaskGrid> masks,
                                   std::span<const int> class_ids, MemoryBank& bank, const ProjectionHead& head,
                                   const ContrastiveOptions& opt) {
  if (priv.size() != masks.size() || priv.size() != class_ids.size() || priv.empty()) {
    throw std::invalid_argument("contrastive loss: batch sizes disagree or empty");
  }
  std::vector<ag::Var> rows;
  std::vector<int> labels;
  // Per image and label: the sampled row offsets into the concatenated batch.
  std::vector<std::pair<int, std::vector<int>>> enqueue_plan;
  int offset = 0;
  for (std::size_t b = 0; b < priv.size(); ++b) {
    const int h = priv[b].dim(1), w = priv[b].dim(2);
    const Tensor mask = data::downsample_mask(masks[b], h, w);
    std::vector<int> fg, bg;
    for (int p = 0; p < h * w; ++p) (mask[p] > 0.5 ? fg : bg).push_back(p);
    Rng rng(derive_seed(opt.seed, {0x5a3eULL, b}));
    std::shuffle(fg.begin(), fg.end(), rng.engine());
    std::shuffle(bg.begin(), bg.end(), rng.engine());
    fg.resize(std::min<std::size_t>(fg.size(), opt.max_fg_pixels));
    bg.resize(std::min<std::size_t>(bg.size(), opt.max_bg_pixels));
    std::vector<int> pixels = fg;
    pixels.insert(pixels.end(), bg.begin(), bg.end());
    if (pixels.empty()) continue;
    rows.push_back(ag::gather_columns(head.forward(priv[b]), pixels));

    std::vector<int> fg_rows, bg_rows;
    for (std::size_t i = 0; i < fg.size(); ++i) {
      labels.push_back(class_ids[b]);
      if (static_cast<int>(i) < opt.enqueue_per_class) fg_rows.push_back(offset + static_cast<int>(i));
    }
    for (std::size_t i = 0; i < bg.size(); ++i) {
      labels.push_back(kBackgroundClass);
      if (static_cast<int>(i) < opt.enqueue_per_class) bg_rows.push_back(offset + static_cast<int>(fg.size() + i));
    }
    enqueue_plan.emplace_back(class_ids[b], std::move(fg_rows));
    enqueue_plan.emplace_back(kBackgroundClass, std::move(bg_rows));
    offset += static_cast<int>(pixels.size());
  }
  if (rows.empty()) {
    ContrastiveResult res;
    res.loss = ag::constant(Tensor::scalar(0.0));
    res.no_pair = true;
    return res;
  }
  const ag::Var z = rows.size() == 1 ? rows[0] : ag::concat0(rows);
  ContrastiveResult res = contrastive_loss_embeddings(z, labels, bank, opt.tau, opt.seed);

  const int d = z.dim(1);
  for (const auto& [label, plan_rows] : enqueue_plan) {
    for (int r : plan_rows) bank.enqueue(std::span<const double>(z.value().data() + static_cast<std::size_t>(r) * d, d), label);
  }
  return res;
}

ag::Var orthogonality_loss(std::span<const ag::Var> shared, std::span<const ag::Var> priv) {
  if (shared.size() != priv.size() || shared.empty()) {
    throw std::invalid_argument("orthogonality loss: batch sizes disagree or empty");
  }
  ag::Var total;
  for (std::size_t b = 0; b < shared.size(); ++b) {
    require_same_shape(shared[b].value(), priv[b].value(), "orthogonality loss");
    const int c = shared[b].dim(0);
    const int hw = shared[b].dim(1) * shared[b].dim(2);
    const ag::Var s = ag::reshape(shared[b], {c, hw});
    const ag::Var p = ag::reshape(priv[b], {c, hw});
    const ag::Var ss = ag::sum_squares(s);
    const ag::Var pp = ag::sum_squares(p);
    if (std::sqrt(ss.value()[0]) * std::sqrt(pp.value()[0]) < kOrthoEps) continue;
    const ag::Var gram = ag::matmul(s, ag::transpose2d(p));
    const ag::Var term = ag::sum_squares(gram) / (ag::sqrt(ss) * ag::sqrt(pp));
    total = total.defined() ? total + term : term;
  }
  if (!total.defined()) return ag::constant(Tensor::scalar(0.0));
  return ag::mul_scalar(total, 1.0 / static_cast<double>(shared.size()));
}

double mean_abs_cross_correlation(const Tensor& shared, const Tensor& priv) {
  if (shared.rank() != 3 || priv.rank() != 3 || shared.dim(1) != priv.dim(1) || shared.dim(2) != priv.dim(2)) {
    throw ShapeError("cross correlation needs matching spatial shapes");
  }
  const int cs = shared.dim(0), cp = priv.dim(0);
  const int hw = shared.dim(1) * shared.dim(2);
  auto centred = [hw](const Tensor& t, int c, std::vector<double>& out) -> double {
    const double* row = t.data() + static_cast<std::size_t>(c) * hw;
    const double mu = std::accumulate(row, row + hw, 0.0) / hw;
    double var = 0;
    for (int i = 0; i < hw; ++i) {
      out[i] = row[i] - mu;
      var += out[i] * out[i];
    }
    return std::sqrt(var);
  };
  std::vector<std::vector<double>> sc(cs, std::vector<double>(hw)), pc(cp, std::vector<double>(hw));
  std::vector<double> sn(cs), pn(cp);
  for (int c = 0; c < cs; ++c) sn[c] = centred(shared, c, sc[c]);
  for (int c = 0; c < cp; ++c) pn[c] = centred(priv, c, pc[c]);
  double total = 0;
  for (int a = 0; a < cs; ++a) {
    for (int b = 0; b < cp; ++b) {
      if (sn[a] < 1e-12 || pn[b] < 1e-12) continue;
      double dot = 0;
      for (int i = 0; i < hw; ++i) dot += sc[a][i] * pc[b][i];
      total += std::abs(dot / (sn[a] * pn[b]));
    }
  }
  return total / (static_cast<double>(cs) * cp);
}

}  // namespace dcdnet::acfd
