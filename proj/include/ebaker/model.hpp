#pragma once

// Twin-tower encoders in the CLIP mold: a vision tower over pre-extracted
// patch vectors and a text tower over token ids, both emitting one global
// feature plus per-position local features after a shared-width projection.
// The keyword reasoning head cross-attends masked text locals onto vision
// features and predicts the masked keyword ids over the vocabulary.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ebaker/corpus.hpp"
#include "ebaker/io.hpp"
#include "ebaker/tensor.hpp"

namespace ebaker::model {

struct ModelConfig {
    std::size_t d_in = 8;        // patch feature width fed to the vision tower
    std::size_t d_model = 64;
    std::size_t d_out = 32;      // shared embedding width
    std::size_t n_layers = 2;    // transformer blocks per tower
    std::size_t n_heads = 4;
    std::size_t n_patches = 16;
    std::size_t max_seq_len = 32;
    std::size_t ker_layers = 4;
    std::size_t vocab_size = 0;  // filled in from the vocabulary
    double init_std = 0.02;
    double init_temperature = 0.07;

    nlohmann::json to_json() const {
        return {{"d_in", d_in},           {"d_model", d_model},
                {"d_out", d_out},         {"n_layers", n_layers},
                {"n_heads", n_heads},     {"n_patches", n_patches},
                {"max_seq_len", max_seq_len}, {"ker_layers", ker_layers},
                {"vocab_size", vocab_size},   {"init_std", init_std},
                {"init_temperature", init_temperature}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.d_in = j.value("d_in", c.d_in);
        c.d_model = j.value("d_model", c.d_model);
        c.d_out = j.value("d_out", c.d_out);
        c.n_layers = j.value("n_layers", c.n_layers);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.n_patches = j.value("n_patches", c.n_patches);
        c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
        c.ker_layers = j.value("ker_layers", c.ker_layers);
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.init_std = j.value("init_std", c.init_std);
        c.init_temperature = j.value("init_temperature", c.init_temperature);
        return c;
    }
};

struct FeaturePack {
    Tensor global;  // [1 x d_out]
    Tensor locals;  // [L x d_out]
};

namespace detail {

struct Linear {
    Tensor w;  // [in x out]
    Tensor b;  // [out]

    void init(ParameterStore& ps, const std::string& prefix, std::size_t in, std::size_t out,
              Rng& rng, double std) {
        Tensor wt = Tensor::zeros({in, out});
        fill_trunc_normal(wt, rng, std);
        w = ps.add(prefix + ".w", wt);
        b = ps.add(prefix + ".b", Tensor::zeros({out}));
    }

    Tensor operator()(const Tensor& x) const {
        return ops::add_rowvec(ops::matmul(x, w), b);
    }
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;

    void init(ParameterStore& ps, const std::string& prefix, std::size_t d) {
        gain = ps.add(prefix + ".gain", Tensor::full({d}, 1.0));
        bias = ps.add(prefix + ".bias", Tensor::zeros({d}));
    }

    Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, gain, bias); }
};

// Pre-norm transformer block: x += attn(ln1(x)); x += mlp(ln2(x)).
struct TransformerBlock {
    LayerNormParams ln1, ln2;
    Linear wq, wk, wv, wo;
    Linear fc1, fc2;
    std::size_t n_heads = 1;

    void init(ParameterStore& ps, const std::string& prefix, std::size_t d,
              std::size_t heads, Rng& rng, double std) {
        n_heads = heads;
        ln1.init(ps, prefix + ".ln1", d);
        wq.init(ps, prefix + ".attn.wq", d, d, rng, std);
        wk.init(ps, prefix + ".attn.wk", d, d, rng, std);
        wv.init(ps, prefix + ".attn.wv", d, d, rng, std);
        wo.init(ps, prefix + ".attn.wo", d, d, rng, std);
        ln2.init(ps, prefix + ".ln2", d);
        fc1.init(ps, prefix + ".mlp.fc1", d, 4 * d, rng, std);
        fc2.init(ps, prefix + ".mlp.fc2", 4 * d, d, rng, std);
    }

    Tensor operator()(const Tensor& x, const ops::AttentionMask* mask = nullptr) const {
        Tensor h = ln1(x);
        Tensor attn =
            wo(ops::multi_head_attention(wq(h), wk(h), wv(h), n_heads, mask));
        Tensor y = ops::add(x, attn);
        Tensor m = fc2(ops::quick_gelu(fc1(ln2(y))));
        return ops::add(y, m);
    }

    // cross-attention variant: queries from q_in, keys/values from kv
    Tensor cross(const Tensor& q_in, const Tensor& kv) const {
        Tensor h = ln1(q_in);
        Tensor attn = wo(ops::multi_head_attention(wq(h), wk(kv), wv(kv), n_heads));
        Tensor y = ops::add(q_in, attn);
        Tensor m = fc2(ops::quick_gelu(fc1(ln2(y))));
        return ops::add(y, m);
    }
};

}  // namespace detail

class VisionEncoder {
  public:
    void init(ParameterStore& ps, const ModelConfig& cfg, Rng& rng) {
        cfg_ = cfg;
        patch_proj_.init(ps, "vision.patch_proj", cfg.d_in, cfg.d_model, rng, cfg.init_std);
        Tensor cls = Tensor::zeros({1, cfg.d_model});
        fill_trunc_normal(cls, rng, cfg.init_std);
        cls_ = ps.add("vision.cls", cls);
        Tensor pos = Tensor::zeros({cfg.n_patches + 1, cfg.d_model});
        fill_trunc_normal(pos, rng, cfg.init_std);
        pos_ = ps.add("vision.pos", pos);
        blocks_.resize(cfg.n_layers);
        for (std::size_t i = 0; i < cfg.n_layers; ++i)
            blocks_[i].init(ps, "vision.block" + std::to_string(i), cfg.d_model, cfg.n_heads,
                            rng, cfg.init_std);
        ln_post_.init(ps, "vision.ln_post", cfg.d_model);
        Tensor proj = Tensor::zeros({cfg.d_model, cfg.d_out});
        fill_trunc_normal(proj, rng, cfg.init_std);
        out_proj_ = ps.add("vision.out_proj", proj);
    }

    // patches: [N x d_in] -> global [1 x d_out] from the class slot, locals
    // [N x d_out] from the patch slots.
    FeaturePack encode(const Tensor& patches) const {
        if (patches.rank() != 2 || patches.rows() != cfg_.n_patches ||
            patches.cols() != cfg_.d_in)
            throw std::invalid_argument("encode_image: expected " +
                                        std::to_string(cfg_.n_patches) + "x" +
                                        std::to_string(cfg_.d_in) + " patches, got " +
                                        shape_str(patches.shape()));
        Tensor x = ops::concat_rows({cls_, patch_proj_(patches)});
        x = ops::add(x, pos_);
        for (const auto& b : blocks_) x = b(x);
        x = ln_post_(x);
        Tensor y = ops::matmul(x, out_proj_);
        FeaturePack out;
        out.global = ops::take_rows(y, {0});
        std::vector<std::size_t> rows(cfg_.n_patches);
        for (std::size_t i = 0; i < cfg_.n_patches; ++i) rows[i] = i + 1;
        out.locals = ops::take_rows(y, rows);
        return out;
    }

  private:
    ModelConfig cfg_;
    detail::Linear patch_proj_;
    Tensor cls_;
    Tensor pos_;
    std::vector<detail::TransformerBlock> blocks_;
    detail::LayerNormParams ln_post_;
    Tensor out_proj_;
};

class TextEncoder {
  public:
    void init(ParameterStore& ps, const ModelConfig& cfg, Rng& rng) {
        cfg_ = cfg;
        Tensor emb = Tensor::zeros({cfg.vocab_size, cfg.d_model});
        fill_trunc_normal(emb, rng, cfg.init_std);
        tok_emb_ = ps.add("text.tok_emb", emb);
        Tensor pos = Tensor::zeros({cfg.max_seq_len, cfg.d_model});
        fill_trunc_normal(pos, rng, cfg.init_std);
        pos_ = ps.add("text.pos", pos);
        blocks_.resize(cfg.n_layers);
        for (std::size_t i = 0; i < cfg.n_layers; ++i)
            blocks_[i].init(ps, "text.block" + std::to_string(i), cfg.d_model, cfg.n_heads,
                            rng, cfg.init_std);
        ln_final_.init(ps, "text.ln_final", cfg.d_model);
        Tensor proj = Tensor::zeros({cfg.d_model, cfg.d_out});
        fill_trunc_normal(proj, rng, cfg.init_std);
        out_proj_ = ps.add("text.out_proj", proj);
    }

    // Global feature from the [EOS] slot; locals are every slot before it
    // (pads sit after [EOS] and are masked out of attention).
    FeaturePack encode(const std::vector<std::size_t>& tokens) const {
        if (tokens.empty() || tokens.size() > cfg_.max_seq_len)
            throw std::invalid_argument("encode_text: sequence length " +
                                        std::to_string(tokens.size()) + " out of range");
        std::size_t eos_pos = tokens.size();
        for (std::size_t i = 0; i < tokens.size(); ++i)
            if (tokens[i] == corpus::Vocabulary::kEos) {
                eos_pos = i;
                break;
            }
        if (eos_pos == tokens.size())
            throw std::invalid_argument("encode_text: no [EOS] token present");
        if (eos_pos == 0) throw std::invalid_argument("encode_text: empty content");

        ops::AttentionMask mask;
        mask.key_padding.resize(tokens.size());
        bool any_pad = false;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            bool is_pad = tokens[i] == corpus::Vocabulary::kPad;
            mask.key_padding[i] = is_pad;
            any_pad = any_pad || is_pad;
        }

        Tensor x = ops::embedding_lookup(tok_emb_, tokens);
        std::vector<std::size_t> pos_rows(tokens.size());
        for (std::size_t i = 0; i < tokens.size(); ++i) pos_rows[i] = i;
        x = ops::add(x, ops::take_rows(pos_, pos_rows));
        const ops::AttentionMask* mp = any_pad ? &mask : nullptr;
        for (const auto& b : blocks_) x = b(x, mp);
        x = ln_final_(x);
        Tensor y = ops::matmul(x, out_proj_);
        FeaturePack out;
        out.global = ops::take_rows(y, {eos_pos});
        std::vector<std::size_t> rows(eos_pos);
        for (std::size_t i = 0; i < eos_pos; ++i) rows[i] = i;
        out.locals = ops::take_rows(y, rows);
        return out;
    }

  private:
    ModelConfig cfg_;
    Tensor tok_emb_;
    Tensor pos_;
    std::vector<detail::TransformerBlock> blocks_;
    detail::LayerNormParams ln_final_;
    Tensor out_proj_;
};

// Cross-attention from masked text locals onto vision global+locals, a stack
// of transformer blocks, then an MLM head (linear, QuickGELU, LayerNorm,
// linear) scoring each masked slot over the vocabulary.
class KerHead {
  public:
    void init(ParameterStore& ps, const ModelConfig& cfg, Rng& rng) {
        cfg_ = cfg;
        cross_.init(ps, "ker.cross", cfg.d_out, cfg.n_heads, rng, cfg.init_std);
        blocks_.resize(cfg.ker_layers);
        for (std::size_t i = 0; i < cfg.ker_layers; ++i)
            blocks_[i].init(ps, "ker.block" + std::to_string(i), cfg.d_out, cfg.n_heads, rng,
                            cfg.init_std);
        mlm_l1_.init(ps, "ker.mlm.l1", cfg.d_out, cfg.d_out, rng, cfg.init_std);
        mlm_ln_.init(ps, "ker.mlm.ln", cfg.d_out);
        mlm_l2_.init(ps, "ker.mlm.l2", cfg.d_out, cfg.vocab_size, rng, cfg.init_std);
    }

    // masked_text_locals: [W x d_out]; vision_features: [(N+1) x d_out];
    // returns logits [M x vocab] for the rows at masked_positions.
    Tensor forward(const Tensor& masked_text_locals, const Tensor& vision_features,
                   const std::vector<std::size_t>& masked_positions) const {
        if (masked_positions.empty()) return Tensor::zeros({0, cfg_.vocab_size});
        const std::size_t w = masked_text_locals.rows();
        for (std::size_t p : masked_positions)
            if (p >= w)
                throw std::out_of_range("ker_forward: masked position " + std::to_string(p) +
                                        " outside locals of length " + std::to_string(w));
        Tensor x = cross_.cross(masked_text_locals, vision_features);
        for (const auto& b : blocks_) x = b(x);
        Tensor picked = ops::take_rows(x, masked_positions);
        Tensor h = ops::quick_gelu(mlm_l1_(picked));
        h = mlm_ln_(h);
        return mlm_l2_(h);
    }

  private:
    ModelConfig cfg_;
    detail::TransformerBlock cross_;
    std::vector<detail::TransformerBlock> blocks_;
    detail::Linear mlm_l1_;
    detail::LayerNormParams mlm_ln_;
    detail::Linear mlm_l2_;
};

// The full retrieval model: both towers, the KER head, and the learnable
// log-inverse-temperature for the contrastive losses.
class Model {
  public:
    void init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg_ = cfg;
        if (cfg.vocab_size == 0) throw std::invalid_argument("Model: vocab_size unset");
        if (cfg.d_model % cfg.n_heads != 0 || cfg.d_out % cfg.n_heads != 0)
            throw std::invalid_argument("Model: heads must divide d_model and d_out");
        Rng rng = make_stream(seed, 100);
        vision_.init(params_, cfg, rng);
        text_.init(params_, cfg, rng);
        ker_.init(params_, cfg, rng);
        log_inv_temp_ =
            params_.add("temp.log_inv", Tensor::scalar(std::log(1.0 / cfg.init_temperature)));
    }

    const ModelConfig& config() const { return cfg_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    const VisionEncoder& vision() const { return vision_; }
    const TextEncoder& text() const { return text_; }
    const KerHead& ker() const { return ker_; }

    FeaturePack encode_image(const Tensor& patches) const { return vision_.encode(patches); }
    FeaturePack encode_text(const std::vector<std::size_t>& tokens) const {
        return text_.encode(tokens);
    }

    // 1/gamma as a one-element tensor; gamma stays positive by construction.
    Tensor inv_temperature() const { return ops::exp(log_inv_temp_); }

    void save(const std::filesystem::path& path) const { io::save_tensors(params_, path); }
    void load(const std::filesystem::path& path) { io::load_tensors(params_, path); }

    void save_hparams(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write hparams: " + path.string());
        os << cfg_.to_json().dump(2) << "\n";
    }

  private:
    ModelConfig cfg_;
    ParameterStore params_;
    VisionEncoder vision_;
    TextEncoder text_;
    KerHead ker_;
    Tensor log_inv_temp_;
};

}  // namespace ebaker::model
