#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "xling/corpus.hpp"
#include "xling/error.hpp"
#include "xling/optim.hpp"
#include "xling/rng.hpp"
#include "xling/subword.hpp"
#include "xling/tape.hpp"
#include "xling/vocab.hpp"

namespace xling {

enum class SubwordMode { kNone, kAverage, kCnn };
enum class Direction { kForward, kBackward };

inline std::string subword_mode_name(SubwordMode m) {
    switch (m) {
        case SubwordMode::kNone: return "none";
        case SubwordMode::kAverage: return "ave";
        case SubwordMode::kCnn: return "cnn";
    }
    return "none";
}

inline SubwordMode subword_mode_from(const std::string& s) {
    if (s == "none") return SubwordMode::kNone;
    if (s == "ave") return SubwordMode::kAverage;
    if (s == "cnn") return SubwordMode::kCnn;
    throw ConfigError("unknown subword_mode: " + s + " (expected none|ave|cnn)");
}

struct TrainConfig {
    int epochs = 200;
    int batch_size = 16;
    int dim = 500;  // word embedding size == LSTM hidden size
    int enc_layers = 1;
    int dec_layers = 1;
    double dropout = 0.5;
    double clip = 5.0;
    std::uint64_t seed = 1;
    int eval_every = 10;
    SubwordMode subword_mode = SubwordMode::kAverage;
    int subword_vocab = 1000;
    int dice_min_count = 3;
    double dice_threshold = 0.8;
    // ablation switches
    bool no_reconstruction = false;
    bool no_backward_decoder = false;
    bool no_weight_tying = false;
    bool no_dropout = false;
    bool no_word_embedding = false;

    double effective_dropout() const { return no_dropout ? 0.0 : dropout; }

    void validate() const {
        if (dim <= 0 || dim % 2 != 0)
            throw ConfigError("dim must be positive and even (bidirectional halves concatenate to dim)");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (batch_size <= 0) throw ConfigError("batch_size must be positive");
        if (enc_layers <= 0 || dec_layers <= 0) throw ConfigError("layer counts must be positive");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
        if (clip <= 0.0) throw ConfigError("clip must be positive");
        if (eval_every <= 0) throw ConfigError("eval_every must be positive");
        if (subword_vocab <= 0) throw ConfigError("subword_vocab must be positive");
        if (no_word_embedding && subword_mode == SubwordMode::kNone)
            throw ConfigError("no_word_embedding requires a subword mode (the embedding would be empty)");
    }
};

struct LstmCellParams {
    Parameter* wx = nullptr;
    Parameter* wh = nullptr;
    Parameter* b = nullptr;
};
using LstmStack = std::vector<LstmCellParams>;

// Frozen pretrained rows for one language plus the trainable elementwise
// adapter a (*) row + b shared by every covered word.
struct AdapterParams {
    Tensor epre;              // covered rows, frozen (never a Parameter)
    std::vector<int> row_of;  // vocab id -> row in epre, or -1
    Parameter* a = nullptr;
    Parameter* b = nullptr;
};

struct LanguageParams {
    Parameter* emb = nullptr;  // E^l, also the tied output matrix
    Parameter* out = nullptr;  // untied output matrix (no_weight_tying only)
    std::optional<AdapterParams> adapter;
};

struct Attention {
    int ubar = -1;
    int rbar = -1;
    int alpha = -1;
};

// Attention weights are dot-product softmax over encoder states; the same
// weights average both the hidden states and the input embeddings.
inline Attention attend(Tape& t, int h, int u_mat, int r_mat) {
    int alpha = t.softmax(t.matvec(u_mat, h));
    return {t.matvec_t(u_mat, alpha), t.matvec_t(r_mat, alpha), alpha};
}

struct Encoded {
    int u_mat = -1;            // (n+2) x d contextualised states
    int r_mat = -1;            // (n+2) x d embedded inputs (dropped when training)
    std::vector<int> ids;      // BOS + tokens + EOS
    int lang = 0;
};

class Model {
public:
    TrainConfig cfg;
    std::vector<std::string> langs;
    std::vector<Vocabulary> vocabs;
    SubwordTable subwords;
    ParameterStore store;

    Model(TrainConfig config, std::vector<std::string> lang_tags, std::vector<Vocabulary> vocab_list,
          SubwordTable subword_table)
        : cfg(config), langs(std::move(lang_tags)), vocabs(std::move(vocab_list)),
          subwords(std::move(subword_table)) {
        cfg.validate();
        if (langs.size() != vocabs.size()) throw ConfigError("one vocabulary per language required");
        if (subwords.language_count() < static_cast<int>(langs.size()))
            subwords.set_language_count(static_cast<int>(langs.size()));
        const int d = cfg.dim;
        lang_params_.resize(langs.size());
        for (std::size_t l = 0; l < langs.size(); ++l)
            lang_params_[l].emb = store.create("emb." + langs[l], Tensor::matrix(vocabs[l].size(), d));
        if (cfg.subword_mode != SubwordMode::kNone)
            z_ = store.create("subword.z", Tensor::matrix(std::max(subwords.piece_count(), 1), d));
        if (cfg.subword_mode == SubwordMode::kCnn) {
            cnn_w_ = store.create("cnn.w", Tensor::matrix(d, 3 * d));
            cnn_b_ = store.create("cnn.b", Tensor({d}));
        }
        enc_fwd_ = make_stack("enc.fwd", cfg.enc_layers, d, d / 2);
        enc_bwd_ = make_stack("enc.bwd", cfg.enc_layers, d, d / 2);
        dec_fwd_.resize(langs.size());
        dec_bwd_.resize(langs.size());
        for (std::size_t l = 0; l < langs.size(); ++l) {
            dec_fwd_[l] = make_stack("dec." + langs[l] + ".fwd", cfg.dec_layers, d, d);
            if (!cfg.no_backward_decoder)
                dec_bwd_[l] = make_stack("dec." + langs[l] + ".bwd", cfg.dec_layers, d, d);
        }
        proj_ = store.create("proj.w", Tensor::matrix(d, d));
        if (cfg.no_weight_tying)
            for (std::size_t l = 0; l < langs.size(); ++l)
                lang_params_[l].out = store.create("out." + langs[l], Tensor::matrix(vocabs[l].size(), d));
        // Per-language prefix offsets into the output-layer subword dropout
        // counter space; rebuilt whenever segmentations change.
        rebuild_q_offsets();
    }

    int lang_index(const std::string& tag) const {
        for (std::size_t i = 0; i < langs.size(); ++i)
            if (langs[i] == tag) return static_cast<int>(i);
        throw DataError("unknown language tag: " + tag);
    }

    // Attach frozen pretrained embeddings for one language. Covered words
    // use a*E_pre+b; the rest keep their trainable subword-aware rows.
    void attach_adapter(int lang, Tensor epre, std::vector<int> row_of) {
        if (cfg.subword_mode != SubwordMode::kAverage)
            throw ConfigError("pretrained embeddings require subword_mode=ave for uncovered words");
        if (epre.cols() != cfg.dim)
            throw ConfigError("pretrained embedding dimension " + std::to_string(epre.cols()) +
                              " does not match model dim " + std::to_string(cfg.dim));
        AdapterParams ad;
        ad.epre = std::move(epre);
        ad.row_of = std::move(row_of);
        ad.a = store.create("adapter." + langs[lang] + ".a", Tensor({cfg.dim}));
        ad.b = store.create("adapter." + langs[lang] + ".b", Tensor({cfg.dim}));
        lang_params_[lang].adapter = std::move(ad);
    }

    // Uniform(-0.1, 0.1) for matrices, zero biases, identity adapters.
    // Untied output matrices start as a copy of the tied rows they replace.
    void init_parameters(Rng& rng) {
        for (const auto& p : store) {
            if (p->name.size() > 2 && p->name.compare(p->name.size() - 2, 2, ".a") == 0 &&
                p->name.rfind("adapter.", 0) == 0) {
                p->value.fill(1.0);
            } else if (p->name.rfind("out.", 0) == 0) {
                continue;  // filled below from the materialized tied rows
            } else if (p->value.rank() == 1) {
                p->value.zero();
            } else {
                p->value = Tensor::uniform(p->value.shape(), -0.1, 0.1, rng);
            }
        }
        if (cfg.no_weight_tying)
            for (std::size_t l = 0; l < langs.size(); ++l) {
                Tensor rows = materialize_embeddings(static_cast<int>(l));
                lang_params_[l].out->value = std::move(rows);
            }
    }

    // ---- embeddings ---------------------------------------------------------

    // Subword-aware embedding row in evaluation mode (no tape, no dropout).
    void static_embedding_row(int lang, int word_id, double* out) const {
        const int d = cfg.dim;
        std::fill(out, out + d, 0.0);
        const LanguageParams& lp = lang_params_[lang];
        if (lp.adapter && lp.adapter->row_of[word_id] >= 0) {
            const double* row = lp.adapter->epre.row(lp.adapter->row_of[word_id]);
            const double* a = lp.adapter->a->value.data();
            const double* b = lp.adapter->b->value.data();
            for (int j = 0; j < d; ++j) out[j] = a[j] * row[j] + b[j];
            return;
        }
        if (!cfg.no_word_embedding)
            kernels::add(out, lp.emb->value.row(word_id), d);
        const std::vector<int>& q = subwords.word_pieces(lang, word_id);
        if (cfg.subword_mode == SubwordMode::kNone || q.empty()) return;
        if (cfg.subword_mode == SubwordMode::kAverage) {
            Tensor acc({d});
            for (int k : q) kernels::add(acc.data(), z_->value.row(k), d);
            kernels::axpy(out, 1.0 / q.size(), acc.data(), d);
        } else {
            Tensor x({static_cast<int>(q.size()), cfg.dim});
            for (std::size_t k = 0; k < q.size(); ++k)
                std::copy(z_->value.row(q[k]), z_->value.row(q[k]) + d, x.row(static_cast<int>(k)));
            Tensor y = Tape::conv3_tanh_forward(x, cnn_w_->value, cnn_b_->value);
            Tensor acc({d});
            for (int r = 0; r < y.rows(); ++r) kernels::add(acc.data(), y.row(r), d);
            kernels::axpy(out, 1.0 / y.rows(), acc.data(), d);
        }
    }

    Tensor materialize_embeddings(int lang) const {
        Tensor out = Tensor::matrix(vocabs[lang].size(), cfg.dim);
        for (int w = 0; w < vocabs[lang].size(); ++w)
            static_embedding_row(lang, w, out.row(w));
        return out;
    }

    // Taped subword-aware embedding of one word (Eq. 8 path, or the frozen
    // adapter path for covered words). Dropout masks are drawn independently
    // for the word row and each subword row.
    int embed_word(Tape& t, int lang, int word_id, bool training, Rng& rng) const {
        const double rate = cfg.effective_dropout();
        const LanguageParams& lp = lang_params_[lang];
        std::vector<int> parts;
        if (lp.adapter && lp.adapter->row_of[word_id] >= 0) {
            Tensor row({cfg.dim});
            std::copy(lp.adapter->epre.row(lp.adapter->row_of[word_id]),
                      lp.adapter->epre.row(lp.adapter->row_of[word_id]) + cfg.dim, row.data());
            int scaled = t.mul(t.constant(std::move(row)), t.leaf(lp.adapter->a));
            parts.push_back(t.dropout(t.add(scaled, t.leaf(lp.adapter->b)), rate, training, rng));
        } else {
            if (!cfg.no_word_embedding)
                parts.push_back(t.dropout(t.row(t.leaf(lp.emb), word_id), rate, training, rng));
            const std::vector<int>& q = subwords.word_pieces(lang, word_id);
            if (cfg.subword_mode != SubwordMode::kNone && !q.empty()) {
                if (cfg.subword_mode == SubwordMode::kAverage) {
                    parts.push_back(subword_average(t, q, rate, training, rng));
                } else {
                    int gathered = subword_gather(t, q, rate, training, rng);
                    parts.push_back(t.mean_rows(t.conv3_tanh(gathered, t.leaf(cnn_w_), t.leaf(cnn_b_))));
                }
            }
        }
        if (parts.empty()) return t.constant(Tensor({cfg.dim}));
        int out = parts[0];
        for (std::size_t i = 1; i < parts.size(); ++i) out = t.add(out, parts[i]);
        return out;
    }

    // ---- encoder -------------------------------------------------------------

    // BOS/EOS are added here; the returned matrices have one row per token
    // including them, so a contextualised BOS state exists for the null
    // heuristic and attention may select it as a "null" target.
    Encoded encode(Tape& t, int lang, const Sentence& tokens, bool training, Rng& rng) const {
        if (tokens.empty()) throw DataError("encode: empty sentence");
        Encoded enc;
        enc.lang = lang;
        enc.ids.push_back(Vocabulary::kBos);
        enc.ids.insert(enc.ids.end(), tokens.begin(), tokens.end());
        enc.ids.push_back(Vocabulary::kEos);
        const int n = static_cast<int>(enc.ids.size());

        std::vector<int> r_nodes(n);
        for (int i = 0; i < n; ++i) r_nodes[i] = embed_word(t, lang, enc.ids[i], training, rng);

        std::vector<int> x = r_nodes;
        const int zero_state = t.constant(Tensor({cfg.dim / 2}));
        for (int layer = 0; layer < cfg.enc_layers; ++layer) {
            std::vector<int> hf(n), hb(n);
            int h = zero_state, c = zero_state;
            for (int i = 0; i < n; ++i) {
                std::tie(h, c) = cell(t, enc_fwd_[layer], x[i], h, c);
                hf[i] = h;
            }
            h = zero_state;
            c = zero_state;
            for (int i = n - 1; i >= 0; --i) {
                std::tie(h, c) = cell(t, enc_bwd_[layer], x[i], h, c);
                hb[i] = h;
            }
            for (int i = 0; i < n; ++i) x[i] = t.concat(hf[i], hb[i]);
        }
        enc.u_mat = t.stack_rows(x);
        enc.r_mat = t.stack_rows(r_nodes);
        return enc;
    }

    // ---- output layer ---------------------------------------------------------

    // Logits over the target vocabulary: h' = W(ubar + rbar + h) with dropout
    // on the sum, then one score per word against its (tied, subword-aware)
    // embedding row, with fresh output-side dropout masks per step.
    int output_scores(Tape& t, int lang, int h, int ubar, int rbar, bool training, Rng& rng) const {
        const double rate = cfg.effective_dropout();
        int s = t.add(t.add(ubar, rbar), h);
        s = t.dropout(s, rate, training, rng);
        int hprime = t.matvec(t.leaf(proj_), s);
        return output_logits(t, lang, hprime, training, rng);
    }

    int output_distribution(Tape& t, int lang, int h, int ubar, int rbar, bool training, Rng& rng) const {
        return t.softmax(output_scores(t, lang, h, ubar, rbar, training, rng));
    }

    int output_logits(Tape& t, int lang, int hprime, bool training, Rng& rng) const;

    // ---- decoders --------------------------------------------------------------

    // Sum of per-step cross-entropies for one direction. Forward consumes
    // <BOS, y_1..y_M> and predicts <y_1..y_M, EOS>; backward consumes
    // <EOS, y_M..y_1> and predicts <y_M..y_1, BOS>. Decoder states start at
    // zero; the source conditions the prediction only through attention.
    int decode_loss(Tape& t, const Encoded& enc, int lang, const Sentence& target, Direction dir,
                    bool training, Rng& rng) const {
        if (target.empty()) throw DataError("decode_loss: empty target");
        const LstmStack& stack = dir == Direction::kForward ? dec_fwd_[lang] : dec_bwd_[lang];
        if (stack.empty())
            throw ConfigError("backward decoder requested but disabled (no_backward_decoder)");
        std::vector<int> inputs, golds;
        if (dir == Direction::kForward) {
            inputs.push_back(Vocabulary::kBos);
            inputs.insert(inputs.end(), target.begin(), target.end());
            golds.assign(target.begin(), target.end());
            golds.push_back(Vocabulary::kEos);
        } else {
            inputs.push_back(Vocabulary::kEos);
            inputs.insert(inputs.end(), target.rbegin(), target.rend());
            golds.assign(target.rbegin(), target.rend());
            golds.push_back(Vocabulary::kBos);
        }
        const int zero_state = t.constant(Tensor({cfg.dim}));
        std::vector<int> h(stack.size(), zero_state), c(stack.size(), zero_state);
        std::vector<int> terms;
        terms.reserve(inputs.size());
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            int in = embed_word(t, lang, inputs[i], training, rng);
            for (std::size_t layer = 0; layer < stack.size(); ++layer) {
                std::tie(h[layer], c[layer]) = cell(t, stack[layer], in, h[layer], c[layer]);
                in = h[layer];
            }
            Attention att = attend(t, h.back(), enc.u_mat, enc.r_mat);
            int logits = output_scores(t, lang, h.back(), att.ubar, att.rbar, training, rng);
            terms.push_back(t.cross_entropy(logits, golds[i]));
        }
        return t.sum(terms);
    }

    // ---- accessors --------------------------------------------------------------

    const LanguageParams& language(int lang) const { return lang_params_[lang]; }
    Parameter* subword_embeddings() const { return z_; }
    Parameter* projection() const { return proj_; }
    const LstmStack& encoder_stack(Direction d) const {
        return d == Direction::kForward ? enc_fwd_ : enc_bwd_;
    }
    const LstmStack& decoder_stack(int lang, Direction d) const {
        return d == Direction::kForward ? dec_fwd_[lang] : dec_bwd_[lang];
    }
    Parameter* cnn_weight() const { return cnn_w_; }
    Parameter* cnn_bias() const { return cnn_b_; }
    int language_count() const { return static_cast<int>(langs.size()); }

    void rebuild_q_offsets() {
        q_offsets_.assign(langs.size(), {});
        for (std::size_t l = 0; l < langs.size(); ++l) {
            q_offsets_[l].assign(vocabs[l].size() + 1, 0);
            for (int w = 0; w < vocabs[l].size(); ++w)
                q_offsets_[l][w + 1] =
                    q_offsets_[l][w] +
                    static_cast<long long>(subwords.word_pieces(static_cast<int>(l), w).size());
        }
    }

private:
    friend struct OutputLogitsOp;

    // Every layer's input is dim wide: layer 0 consumes embeddings, upper
    // encoder layers consume the concatenated halves of the layer below, and
    // upper decoder layers consume the previous layer's hidden state.
    LstmStack make_stack(const std::string& prefix, int layers, int in_dim, int hidden) {
        LstmStack stack;
        for (int l = 0; l < layers; ++l) {
            const std::string base = prefix + "." + std::to_string(l);
            LstmCellParams cp;
            cp.wx = store.create(base + ".wx", Tensor::matrix(4 * hidden, in_dim));
            cp.wh = store.create(base + ".wh", Tensor::matrix(4 * hidden, hidden));
            cp.b = store.create(base + ".b", Tensor({4 * hidden}));
            stack.push_back(cp);
        }
        return stack;
    }

    std::pair<int, int> cell(Tape& t, const LstmCellParams& p, int x, int h, int c) const {
        return t.lstm_cell(x, h, c, t.leaf(p.wx), t.leaf(p.wh), t.leaf(p.b));
    }

    int subword_average(Tape& t, const std::vector<int>& q, double rate, bool training, Rng& rng) const;
    int subword_gather(Tape& t, const std::vector<int>& q, double rate, bool training, Rng& rng) const;

    std::vector<LanguageParams> lang_params_;
    Parameter* z_ = nullptr;
    Parameter* cnn_w_ = nullptr;
    Parameter* cnn_b_ = nullptr;
    LstmStack enc_fwd_, enc_bwd_;
    std::vector<LstmStack> dec_fwd_, dec_bwd_;
    Parameter* proj_ = nullptr;
    std::vector<std::vector<long long>> q_offsets_;  // [lang][word] prefix sums of |Q|
};

// ---- fused custom ops -----------------------------------------------------

// Mean of (independently dropped) subword embedding rows. The mask is a
// counter-based stream so backward regenerates it instead of storing it.
struct SubwordAveOp final : CustomOp {
    Parameter* z;
    std::vector<int> q;
    double rate;
    std::uint64_t seed;  // 0 means no dropout

    void backward(Tape& t, int self, const Tensor& g) override {
        (void)t;
        (void)self;
        const int d = static_cast<int>(g.size());
        const double inv = 1.0 / q.size();
        if (seed == 0) {
            for (int k : q) kernels::axpy(z->grad.row(k), inv, g.data(), d);
            return;
        }
        const double keep = inv / (1.0 - rate);
        for (std::size_t k = 0; k < q.size(); ++k) {
            double* gz = z->grad.row(q[k]);
            for (int j = 0; j < d; ++j)
                if (dropout_keep(seed, k * static_cast<std::size_t>(d) + j, rate)) gz[j] += keep * g[j];
        }
    }
};

inline int Model::subword_average(Tape& t, const std::vector<int>& q, double rate, bool training,
                                  Rng& rng) const {
    const int d = cfg.dim;
    auto op = std::make_unique<SubwordAveOp>();
    op->z = z_;
    op->q = q;
    op->rate = rate;
    op->seed = (training && rate > 0.0) ? rng.next_u64() : 0;
    Tensor out({d});
    if (op->seed == 0) {
        for (int k : q) kernels::add(out.data(), z_->value.row(k), d);
        out.scale(1.0 / q.size());
    } else {
        const double keep = 1.0 / (1.0 - rate);
        for (std::size_t k = 0; k < q.size(); ++k) {
            const double* zr = z_->value.row(q[k]);
            for (int j = 0; j < d; ++j)
                if (dropout_keep(op->seed, k * static_cast<std::size_t>(d) + j, rate))
                    out[j] += keep * zr[j];
        }
        out.scale(1.0 / q.size());
    }
    return t.custom(std::move(op), {}, std::move(out));
}

// |Q| x d matrix of (independently dropped) subword rows, feeding the CNN.
struct SubwordGatherOp final : CustomOp {
    Parameter* z;
    std::vector<int> q;
    double rate;
    std::uint64_t seed;

    void backward(Tape& t, int self, const Tensor& g) override {
        (void)t;
        (void)self;
        const int d = g.cols();
        if (seed == 0) {
            for (std::size_t k = 0; k < q.size(); ++k)
                kernels::add(z->grad.row(q[k]), g.row(static_cast<int>(k)), d);
            return;
        }
        const double keep = 1.0 / (1.0 - rate);
        for (std::size_t k = 0; k < q.size(); ++k) {
            double* gz = z->grad.row(q[k]);
            const double* gr = g.row(static_cast<int>(k));
            for (int j = 0; j < d; ++j)
                if (dropout_keep(seed, k * static_cast<std::size_t>(d) + j, rate)) gz[j] += keep * gr[j];
        }
    }
};

inline int Model::subword_gather(Tape& t, const std::vector<int>& q, double rate, bool training,
                                 Rng& rng) const {
    const int d = cfg.dim;
    auto op = std::make_unique<SubwordGatherOp>();
    op->z = z_;
    op->q = q;
    op->rate = rate;
    op->seed = (training && rate > 0.0) ? rng.next_u64() : 0;
    Tensor out({static_cast<int>(q.size()), d});
    for (std::size_t k = 0; k < q.size(); ++k) {
        const double* zr = z_->value.row(q[k]);
        double* o = out.row(static_cast<int>(k));
        if (op->seed == 0) {
            std::copy(zr, zr + d, o);
        } else {
            const double keep = 1.0 / (1.0 - rate);
            for (int j = 0; j < d; ++j)
                if (dropout_keep(op->seed, k * static_cast<std::size_t>(d) + j, rate)) o[j] = keep * zr[j];
        }
    }
    return t.custom(std::move(op), {}, std::move(out));
}

// Weight-tied output layer. Each vocabulary word is scored against its
// subword-aware embedding row, resolved exactly as on the input side but
// with fresh dropout masks per site per step (mask streams are keyed so
// backward can regenerate them). With no_weight_tying the rows come from the
// untied output matrix instead.
struct OutputLogitsOp final : CustomOp {
    const Model* model;
    int lang;
    int hprime;  // arg node id
    double rate;
    std::uint64_t seed_word;  // word/adapter/untied row masks (0 = no dropout)
    std::uint64_t seed_sub;   // subword row masks

    // Accumulate logits (forward) or parameter gradients (backward) for one
    // word row. In forward mode `coeff` is unused and `dst` receives the
    // masked row; in backward mode the masked structure is re-derived.
    void forward_into(Tensor& logits, const Tensor& hp) const {
        const Model& m = *model;
        const int d = m.cfg.dim;
        const LanguageParams& lp = m.lang_params_[lang];
        const int vocab = m.vocabs[lang].size();
        const double keep = rate > 0.0 ? 1.0 / (1.0 - rate) : 1.0;
        for (int v = 0; v < vocab; ++v) {
            double acc = 0.0;
            if (m.cfg.no_weight_tying) {
                acc = masked_dot(lp.out->value.row(v), hp.data(), d, seed_word,
                                 static_cast<std::size_t>(v) * d, rate, keep);
            } else if (lp.adapter && lp.adapter->row_of[v] >= 0) {
                const double* pre = lp.adapter->epre.row(lp.adapter->row_of[v]);
                const double* a = lp.adapter->a->value.data();
                const double* b = lp.adapter->b->value.data();
                if (seed_word == 0) {
                    for (int j = 0; j < d; ++j) acc += (a[j] * pre[j] + b[j]) * hp[j];
                } else {
                    for (int j = 0; j < d; ++j)
                        if (dropout_keep(seed_word, static_cast<std::size_t>(v) * d + j, rate))
                            acc += keep * (a[j] * pre[j] + b[j]) * hp[j];
                }
            } else {
                if (!m.cfg.no_word_embedding)
                    acc += masked_dot(lp.emb->value.row(v), hp.data(), d, seed_word,
                                      static_cast<std::size_t>(v) * d, rate, keep);
                acc += subword_term(v, hp);
            }
            logits[v] = acc;
        }
    }

    double subword_term(int v, const Tensor& hp) const {
        const Model& m = *model;
        if (m.cfg.subword_mode == SubwordMode::kNone) return 0.0;
        const std::vector<int>& q = m.subwords.word_pieces(lang, v);
        if (q.empty()) return 0.0;
        const int d = m.cfg.dim;
        const double keep = rate > 0.0 ? 1.0 / (1.0 - rate) : 1.0;
        const std::size_t base = static_cast<std::size_t>(m.q_offsets_[lang][v]) * d;
        if (m.cfg.subword_mode == SubwordMode::kAverage) {
            double acc = 0.0;
            for (std::size_t k = 0; k < q.size(); ++k)
                acc += masked_dot(m.z_->value.row(q[k]), hp.data(), d, seed_sub,
                                  base + k * static_cast<std::size_t>(d), rate, keep);
            return acc / q.size();
        }
        // CNN mode: conv over the masked subword rows, mean pool, dot.
        Tensor x = gather_masked(v);
        Tensor y = Tape::conv3_tanh_forward(x, m.cnn_w_->value, m.cnn_b_->value);
        double acc = 0.0;
        for (int r = 0; r < y.rows(); ++r) acc += kernels::dot(y.row(r), hp.data(), d);
        return acc / y.rows();
    }

    Tensor gather_masked(int v) const {
        const Model& m = *model;
        const std::vector<int>& q = m.subwords.word_pieces(lang, v);
        const int d = m.cfg.dim;
        const double keep = rate > 0.0 ? 1.0 / (1.0 - rate) : 1.0;
        const std::size_t base = static_cast<std::size_t>(m.q_offsets_[lang][v]) * d;
        Tensor x({static_cast<int>(q.size()), d});
        for (std::size_t k = 0; k < q.size(); ++k) {
            const double* zr = m.z_->value.row(q[k]);
            double* o = x.row(static_cast<int>(k));
            if (seed_sub == 0) {
                std::copy(zr, zr + d, o);
            } else {
                for (int j = 0; j < d; ++j)
                    if (dropout_keep(seed_sub, base + k * static_cast<std::size_t>(d) + j, rate))
                        o[j] = keep * zr[j];
            }
        }
        return x;
    }

    static double masked_dot(const double* row, const double* hp, int d, std::uint64_t seed,
                             std::size_t counter, double keep) {
        if (seed == 0) return kernels::dot(row, hp, d);
        double acc = 0.0;
        for (int j = 0; j < d; ++j)
            if (dropout_keep(seed, counter + j, 0.0 /*unused*/)) acc += keep * row[j] * hp[j];
        return acc;
    }

    void backward(Tape& t, int self, const Tensor& g) override;
};

inline int Model::output_logits(Tape& t, int lang, int hprime, bool training, Rng& rng) const {
    auto op = std::make_unique<OutputLogitsOp>();
    op->model = this;
    op->lang = lang;
    op->hprime = hprime;
    op->rate = cfg.effective_dropout();
    const bool drop = training && op->rate > 0.0;
    op->seed_word = drop ? rng.next_u64() : 0;
    op->seed_sub = drop ? rng.next_u64() : 0;
    Tensor logits({vocabs[lang].size()});
    op->forward_into(logits, t.val(hprime));
    OutputLogitsOp* raw = op.get();
    (void)raw;
    return t.custom(std::move(op), {hprime}, std::move(logits));
}

inline void OutputLogitsOp::backward(Tape& t, int self, const Tensor& g) {
    (void)self;
    const Model& m = *model;
    const int d = m.cfg.dim;
    const LanguageParams& lp = m.lang_params_[lang];
    const Tensor& hp = t.val(hprime);
    Tensor& ghp = t.grad(hprime);
    const int vocab = m.vocabs[lang].size();
    const double keep = rate > 0.0 ? 1.0 / (1.0 - rate) : 1.0;

    for (int v = 0; v < vocab; ++v) {
        const double gv = g[v];
        if (gv == 0.0) continue;
        const std::size_t word_ctr = static_cast<std::size_t>(v) * d;
        if (m.cfg.no_weight_tying) {
            scatter_row(lp.out->grad.row(v), lp.out->value.row(v), hp.data(), ghp.data(), gv, d,
                        seed_word, word_ctr, keep);
            continue;
        }
        if (lp.adapter && lp.adapter->row_of[v] >= 0) {
            const double* pre = lp.adapter->epre.row(lp.adapter->row_of[v]);
            const double* a = lp.adapter->a->value.data();
            double* ga = lp.adapter->a->grad.data();
            double* gb = lp.adapter->b->grad.data();
            for (int j = 0; j < d; ++j) {
                if (seed_word != 0 && !dropout_keep(seed_word, word_ctr + j, rate)) continue;
                const double mscale = seed_word == 0 ? 1.0 : keep;
                const double gj = gv * mscale * hp[j];
                ga[j] += gj * pre[j];
                gb[j] += gj;
                ghp[j] += gv * mscale * (a[j] * pre[j] + lp.adapter->b->value[j]);
            }
            continue;
        }
        if (!m.cfg.no_word_embedding)
            scatter_row(lp.emb->grad.row(v), lp.emb->value.row(v), hp.data(), ghp.data(), gv, d,
                        seed_word, word_ctr, keep);
        // subword part
        if (m.cfg.subword_mode == SubwordMode::kNone) continue;
        const std::vector<int>& q = m.subwords.word_pieces(lang, v);
        if (q.empty()) continue;
        const std::size_t base = static_cast<std::size_t>(m.q_offsets_[lang][v]) * d;
        if (m.cfg.subword_mode == SubwordMode::kAverage) {
            const double inv = 1.0 / q.size();
            for (std::size_t k = 0; k < q.size(); ++k)
                scatter_row(m.z_->grad.row(q[k]), m.z_->value.row(q[k]), hp.data(), ghp.data(),
                            gv * inv, d, seed_sub, base + k * static_cast<std::size_t>(d), keep);
        } else {
            // Recompute the CNN forward for this word, then push gradients
            // through pool -> tanh conv -> masked rows.
            Tensor x = gather_masked(v);
            Tensor y = Tape::conv3_tanh_forward(x, m.cnn_w_->value, m.cnn_b_->value);
            const int k = y.rows();
            const double inv = 1.0 / k;
            Tensor gx({k, d});
            Tensor& gw = m.cnn_w_->grad;
            Tensor& gb2 = m.cnn_b_->grad;
            for (int p = 0; p < k; ++p) {
                for (int o = 0; o < d; ++o) {
                    const double yo = y.at(p, o);
                    const double dpre = gv * inv * hp[o] * (1.0 - yo * yo);
                    if (dpre == 0.0) continue;
                    gb2[o] += dpre;
                    for (int tt = -1; tt <= 1; ++tt) {
                        if (p + tt < 0 || p + tt >= k) continue;
                        kernels::axpy(gw.row(o) + (tt + 1) * d, dpre, x.row(p + tt), d);
                        kernels::axpy(gx.row(p + tt), dpre, m.cnn_w_->value.row(o) + (tt + 1) * d, d);
                    }
                }
                kernels::axpy(ghp.data(), gv * inv, y.row(p), d);
            }
            for (std::size_t kk = 0; kk < q.size(); ++kk) {
                double* gz = m.z_->grad.row(q[kk]);
                const double* gxr = gx.row(static_cast<int>(kk));
                for (int j = 0; j < d; ++j) {
                    if (seed_sub != 0 &&
                        !dropout_keep(seed_sub, base + kk * static_cast<std::size_t>(d) + j, rate))
                        continue;
                    gz[j] += (seed_sub == 0 ? 1.0 : keep) * gxr[j];
                }
            }
        }
    }
}

}  // namespace xling
