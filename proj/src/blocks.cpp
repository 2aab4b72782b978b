#include "tabssm/blocks.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace tabssm {

namespace {

constexpr double kNormEps = 1e-5;

Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = uniform(rng, -bound, bound);
  return t;
}

}  // namespace

void init_mamba_block(ParamStore& store, const std::string& prefix, const BlockDims& dims,
                      Rng& rng) {
  const std::size_t d = dims.d, c = dims.inner, s = dims.state, k = dims.kernel,
                    r = dims.dt_rank;
  store.create(prefix + "norm.w", Tensor::ones({d}));
  store.create(prefix + "in_main.w", uniform_init({d, c}, 1.0 / std::sqrt(double(d)), rng));
  store.create(prefix + "in_gate.w", uniform_init({d, c}, 1.0 / std::sqrt(double(d)), rng));
  store.create(prefix + "conv.k", uniform_init({c, k}, 1.0 / std::sqrt(double(k)), rng));
  store.create(prefix + "conv.b", Tensor({c}));
  Tensor a_log({c, s});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t st = 0; st < s; ++st) a_log.at(ch * s + st) = std::log(double(st + 1));
  store.create(prefix + "a_log", std::move(a_log));
  store.create(prefix + "b_proj.w", uniform_init({c, s}, 1.0 / std::sqrt(double(c)), rng));
  store.create(prefix + "c_proj.w", uniform_init({c, s}, 1.0 / std::sqrt(double(c)), rng));
  store.create(prefix + "dt_down.w", uniform_init({c, r}, 1.0 / std::sqrt(double(c)), rng));
  store.create(prefix + "dt_up.w", uniform_init({r, c}, 1.0 / std::sqrt(double(r)), rng));
  Tensor dt_bias({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    // softplus(bias) log-spaced in [1e-3, 1e-1]
    const double dt = std::exp(uniform(rng, std::log(1e-3), std::log(1e-1)));
    dt_bias.at(ch) = std::log(std::expm1(dt));
  }
  store.create(prefix + "dt_up.b", std::move(dt_bias));
  store.create(prefix + "alpha", Tensor::ones({c}));
  store.create(prefix + "out.w", uniform_init({c, d}, 1.0 / std::sqrt(double(c)), rng));
  store.create(prefix + "out.b", Tensor({d}));
}

MambaBlockRefs bind_mamba_block(const ParamSet& ps, const std::string& prefix) {
  MambaBlockRefs p;
  p.norm_w = ps.at(prefix + "norm.w");
  p.in_main_w = ps.at(prefix + "in_main.w");
  p.in_gate_w = ps.at(prefix + "in_gate.w");
  p.conv_k = ps.at(prefix + "conv.k");
  p.conv_b = ps.at(prefix + "conv.b");
  p.a_log = ps.at(prefix + "a_log");
  p.b_proj_w = ps.at(prefix + "b_proj.w");
  p.c_proj_w = ps.at(prefix + "c_proj.w");
  p.dt_down_w = ps.at(prefix + "dt_down.w");
  p.dt_up_w = ps.at(prefix + "dt_up.w");
  p.dt_up_b = ps.at(prefix + "dt_up.b");
  p.alpha = ps.at(prefix + "alpha");
  p.out_w = ps.at(prefix + "out.w");
  p.out_b = ps.at(prefix + "out.b");
  return p;
}

DiffValue selective_scan(DiffValue u, const MambaBlockRefs& p) {
  DiffValue delta = softplus(add(matmul(matmul(u, p.dt_down_w), p.dt_up_w), p.dt_up_b));
  DiffValue a = neg_exp(p.a_log);
  DiffValue b = matmul(u, p.b_proj_w);
  DiffValue c = matmul(u, p.c_proj_w);
  return ssm_scan(delta, a, b, c, u, p.alpha);
}

DiffValue mamba_block_forward(DiffValue x, const MambaBlockRefs& p) {
  DiffValue r = rmsnorm(x, p.norm_w, kNormEps);
  DiffValue main = silu(depthwise_causal_conv(matmul(r, p.in_main_w), p.conv_k, p.conv_b));
  DiffValue gate = matmul(r, p.in_gate_w);
  DiffValue contextual = selective_scan(main, p);
  DiffValue gated = broadcast_mul(contextual, silu(gate));
  DiffValue out = add(matmul(gated, p.out_w), p.out_b);
  return add(x, out);
}

DiffValue bidirectional_forward(DiffValue x, const MambaBlockRefs& fwd,
                                const MambaBlockRefs& bwd) {
  DiffValue forward = mamba_block_forward(x, fwd);
  DiffValue reversed = mamba_block_forward(reverse_axis(x, 1), bwd);
  return add(forward, reverse_axis(reversed, 1));
}

DiffValue interaction_apply(DiffValue z, DiffValue w) {
  const auto& zs = z.value().shape();
  const auto& ws = w.value().shape();
  if (zs.size() != 3 || ws.size() != 2 || ws[0] != ws[1] || ws[0] != zs[1]) {
    throw std::invalid_argument("interaction matrix must be square [J,J] matching z " +
                                shape_str(zs) + ", got " + shape_str(ws));
  }
  return matmul(transpose_last2(w), z);
}

void init_attention_block(ParamStore& store, const std::string& prefix,
                          const AttentionDims& dims, Rng& rng) {
  const std::size_t d = dims.d, f = dims.ff;
  const double bd = 1.0 / std::sqrt(double(d));
  for (const char* name : {"q", "k", "v", "o"}) {
    store.create(prefix + name + std::string(".w"), uniform_init({d, d}, bd, rng));
    store.create(prefix + name + std::string(".b"), Tensor({d}));
  }
  store.create(prefix + "ff1.w", uniform_init({d, f}, bd, rng));
  store.create(prefix + "ff1.b", Tensor({f}));
  store.create(prefix + "ff2.w", uniform_init({f, d}, 1.0 / std::sqrt(double(f)), rng));
  store.create(prefix + "ff2.b", Tensor({d}));
  store.create(prefix + "ln1.w", Tensor::ones({d}));
  store.create(prefix + "ln1.b", Tensor({d}));
  store.create(prefix + "ln2.w", Tensor::ones({d}));
  store.create(prefix + "ln2.b", Tensor({d}));
}

AttentionBlockRefs bind_attention_block(const ParamSet& ps, const std::string& prefix) {
  AttentionBlockRefs p;
  p.q_w = ps.at(prefix + "q.w");
  p.q_b = ps.at(prefix + "q.b");
  p.k_w = ps.at(prefix + "k.w");
  p.k_b = ps.at(prefix + "k.b");
  p.v_w = ps.at(prefix + "v.w");
  p.v_b = ps.at(prefix + "v.b");
  p.o_w = ps.at(prefix + "o.w");
  p.o_b = ps.at(prefix + "o.b");
  p.ff1_w = ps.at(prefix + "ff1.w");
  p.ff1_b = ps.at(prefix + "ff1.b");
  p.ff2_w = ps.at(prefix + "ff2.w");
  p.ff2_b = ps.at(prefix + "ff2.b");
  p.ln1_w = ps.at(prefix + "ln1.w");
  p.ln1_b = ps.at(prefix + "ln1.b");
  p.ln2_w = ps.at(prefix + "ln2.w");
  p.ln2_b = ps.at(prefix + "ln2.b");
  return p;
}

DiffValue attention_block_forward(DiffValue x, const AttentionBlockRefs& p,
                                  const AttentionDims& dims, bool training,
                                  std::uint64_t dropout_seed) {
  const std::size_t d = dims.d, heads = dims.heads;
  if (d % heads != 0) throw std::invalid_argument("embedding dim not divisible by head count");
  const std::size_t hd = d / heads;

  DiffValue q = add(matmul(x, p.q_w), p.q_b);
  DiffValue k = add(matmul(x, p.k_w), p.k_b);
  DiffValue v = add(matmul(x, p.v_w), p.v_b);

  std::vector<DiffValue> head_out;
  head_out.reserve(heads);
  const double scl = 1.0 / std::sqrt(double(hd));
  for (std::size_t h = 0; h < heads; ++h) {
    DiffValue qh = slice(q, 2, h * hd, hd);
    DiffValue kh = slice(k, 2, h * hd, hd);
    DiffValue vh = slice(v, 2, h * hd, hd);
    DiffValue scores = scale(matmul(qh, transpose_last2(kh)), scl);
    DiffValue weights = softmax_last(scores);
    if (training && dims.attn_dropout > 0.0) {
      weights = dropout(weights, dims.attn_dropout, dropout_seed * 1315423911ULL + h);
    }
    head_out.push_back(matmul(weights, vh));
  }
  DiffValue attn = add(matmul(concat(head_out, 2), p.o_w), p.o_b);
  DiffValue x1 = layer_norm(add(x, attn), p.ln1_w, p.ln1_b, kNormEps);

  DiffValue hmid = silu(add(matmul(x1, p.ff1_w), p.ff1_b));
  if (training && dims.ff_dropout > 0.0) {
    hmid = dropout(hmid, dims.ff_dropout, dropout_seed * 2654435761ULL + 97);
  }
  DiffValue ff = add(matmul(hmid, p.ff2_w), p.ff2_b);
  return layer_norm(add(x1, ff), p.ln2_w, p.ln2_b, kNormEps);
}

}  // namespace tabssm
