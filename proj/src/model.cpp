// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#include "two/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "two/common.hpp"
#include "two/rng.hpp"
#include "two/visualctx.hpp"

using nlohmann::json;

namespace two {

std::vector<std::string> word_tokenize(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char c : text) {
        bool word_char = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c >= 0x80;
        if (c >= 'A' && c <= 'Z') {
            cur += static_cast<char>(c - 'A' + 'a');
        } else if (word_char) {
            cur += static_cast<char>(c);
        } else {
            if (!cur.empty()) tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

int Vocabulary::lookup(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? UNK : it->second;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& tok : word_tokenize(text)) ids.push_back(lookup(tok));
    return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    for (int id : ids) {
        if (id < num_specials) continue;
        if (id >= size()) throw ValidationError("token id " + std::to_string(id) + " out of range");
        words.push_back(id_to_token[static_cast<size_t>(id)]);
    }
    return join(words, " ");
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < num_specials) throw ValidationError("vocabulary too small for specials");
    Vocabulary v;
    v.id_to_token = std::move(tokens);
    for (size_t i = 0; i < v.id_to_token.size(); ++i)
        v.token_to_id[v.id_to_token[i]] = static_cast<int>(i);
    return v;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts, int max_size) {
    std::vector<std::string> tokens = {"<pad>", "<bos>", "<eos>", "<unk>", "<q>",
                                       "<v>",   "<m>",   "<t>",   "<p>"};
    if (max_size < static_cast<int>(tokens.size()))
        throw ValidationError("vocabulary cap below the special-token count");
    std::map<std::string, int64_t> counts;
    for (const auto& text : texts)
        for (const auto& tok : word_tokenize(text)) ++counts[tok];
    std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (const auto& [tok, n] : ranked) {
        if (static_cast<int>(tokens.size()) >= max_size) break;
        tokens.push_back(tok);
    }
    return from_tokens(std::move(tokens));
}

void ModelConfig::validate() const {
    if (h < 1 || h_mm < 1) throw ValidationError("hidden sizes must be positive");
    if (L_q < 1 || L_v < 1 || L_t < 1 || k < 1)
        throw ValidationError("L_q, L_v, L_t and k must all be at least 1");
    if (feat_dim < 1) throw ValidationError("feat_dim must be positive");
    if (heads < 1 || h % heads != 0 || h_mm % heads != 0)
        throw ValidationError("heads must divide both hidden sizes");
    if (mm_layers < 1 || txt_layers < 1 || dec_layers < 1)
        throw ValidationError("layer counts must be positive");
    if (max_answer_len < 1) throw ValidationError("max_answer_len must be positive");
    if (disable_mm_encoder && disable_txt_encoder)
        throw ValidationError("at least one encoder must stay enabled");
    if (loss_mode != "standard" && loss_mode != "vocab_scaled")
        throw ValidationError("loss_mode must be \"standard\" or \"vocab_scaled\"");
}

namespace {

std::string implicit_text(const ImplicitKnowledge& k) {
    if (k.evidence.empty()) return k.tentative_answer;
    return k.tentative_answer + " " + k.evidence;
}

void fit_length(std::vector<int>& ids, int len) {
    if (static_cast<int>(ids.size()) > len) ids.resize(static_cast<size_t>(len));
    while (static_cast<int>(ids.size()) < len) ids.push_back(Vocabulary::PAD);
}

}  // namespace

AssembledInput assemble_input(const Sample& sample, const ModelConfig& cfg,
                              const Vocabulary& vocab, const AssemblyOptions& opts) {
    AssembledInput out;
    out.question_ids = vocab.encode(sample.question);
    if (static_cast<int>(out.question_ids.size()) > cfg.L_q)
        out.question_ids.resize(static_cast<size_t>(cfg.L_q));
    std::vector<int> q_ids = out.question_ids;  // unpadded copy feeds the streams
    fit_length(out.question_ids, cfg.L_q);

    out.field_texts["Q"] = sample.question;
    std::string v_text = render_visual_context(sample.visual_context);
    out.field_texts["V"] = v_text;
    std::vector<int> v_ids = vocab.encode(v_text);

    std::vector<int> m_ids, t_ids;
    bool has_m = false, has_t = false;
    if (opts.include_implicit_multimodal && sample.knowledge &&
        sample.knowledge->implicit_multimodal) {
        std::string m_text = implicit_text(*sample.knowledge->implicit_multimodal);
        out.field_texts["M"] = m_text;
        m_ids = vocab.encode(m_text);
        has_m = true;
    }
    if (opts.include_implicit_textual && sample.knowledge && sample.knowledge->implicit_textual) {
        std::string t_text = implicit_text(*sample.knowledge->implicit_textual);
        out.field_texts["T"] = t_text;
        t_ids = vocab.encode(t_text);
        has_t = true;
    }

    for (int j = 0; j < cfg.k; ++j) {
        std::string p_text;
        if (sample.knowledge && j < static_cast<int>(sample.knowledge->passages.size()))
            p_text = sample.knowledge->passages[static_cast<size_t>(j)].text;
        out.field_texts["p" + std::to_string(j)] = p_text;

        std::vector<int> stream;
        stream.push_back(Vocabulary::SEP_Q);
        stream.insert(stream.end(), q_ids.begin(), q_ids.end());
        stream.push_back(Vocabulary::SEP_V);
        stream.insert(stream.end(), v_ids.begin(), v_ids.end());
        if (has_m) {
            stream.push_back(Vocabulary::SEP_M);
            stream.insert(stream.end(), m_ids.begin(), m_ids.end());
        }
        if (has_t) {
            stream.push_back(Vocabulary::SEP_T);
            stream.insert(stream.end(), t_ids.begin(), t_ids.end());
        }
        stream.push_back(Vocabulary::SEP_P);
        std::vector<int> p_ids = vocab.encode(p_text);
        stream.insert(stream.end(), p_ids.begin(), p_ids.end());

        if (static_cast<int>(stream.size()) > cfg.L_t) ++out.truncated_streams;
        fit_length(stream, cfg.L_t);
        out.passages.push_back(std::move(stream));
    }
    return out;
}

Model::Model(ModelConfig cfg, Vocabulary vocab) : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    cfg_.validate();
    if (vocab_.size() < Vocabulary::num_specials)
        throw ValidationError("vocabulary smaller than the special-token set");
    std::mt19937_64 gen(derive_seed(cfg_.seed, "model.init"));
    const int V = vocab_.size();
    const int hm = cfg_.h_mm;
    const int h = cfg_.h;

    auto add = [&](const std::string& name, int rows, int cols) {
        params_[name] = ag::param(rng::glorot_matrix(gen, rows, cols));
    };
    auto add_zero = [&](const std::string& name, int rows, int cols) {
        params_[name] = ag::param(Matrix::Zero(rows, cols));
    };
    auto add_ln = [&](const std::string& prefix, int dim) {
        params_[prefix + ".gain"] = ag::param(Matrix::Ones(1, dim));
        params_[prefix + ".bias"] = ag::param(Matrix::Zero(1, dim));
    };
    auto add_attn = [&](const std::string& prefix, int dim) {
        for (const char* w : {".wq", ".wk", ".wv", ".wo"}) add(prefix + w, dim, dim);
        for (const char* b : {".bq", ".bk", ".bv", ".bo"}) add_zero(prefix + b, 1, dim);
        add_ln(prefix + "_ln", dim);
    };
    auto add_ffn = [&](const std::string& prefix, int dim) {
        add(prefix + ".w1", dim, 2 * dim);
        add_zero(prefix + ".b1", 1, 2 * dim);
        add(prefix + ".w2", 2 * dim, dim);
        add_zero(prefix + ".b2", 1, dim);
        add_ln(prefix + "_ln", dim);
    };

    add("mm.tok_emb", V, hm);
    add("mm.pos_l", cfg_.L_q, hm);
    add("mm.vis_proj.w", cfg_.feat_dim, hm);
    add_zero("mm.vis_proj.b", 1, hm);
    add("mm.box_proj.w", 4, hm);
    add_zero("mm.box_proj.b", 1, hm);
    add_ln("mm.lang_ln", hm);
    add_ln("mm.vis_ln", hm);
    for (int i = 0; i < cfg_.mm_layers; ++i) {
        std::string L = "mm.L" + std::to_string(i) + ".";
        add_attn(L + "cross_l", hm);
        add_attn(L + "cross_v", hm);
        add_attn(L + "self_l", hm);
        add_attn(L + "self_v", hm);
        add_ffn(L + "ffn_l", hm);
        add_ffn(L + "ffn_v", hm);
    }

    add("txt.tok_emb", V, h);
    add("txt.pos", cfg_.L_t, h);
    add_ln("txt.emb_ln", h);
    for (int i = 0; i < cfg_.txt_layers; ++i) {
        std::string L = "txt.L" + std::to_string(i) + ".";
        add_attn(L + "self", h);
        add_ffn(L + "ffn", h);
    }

    add("bridge.fc1.w", hm, cfg_.bridge_mid());
    add_zero("bridge.fc1.b", 1, cfg_.bridge_mid());
    add("bridge.fc2.w", cfg_.bridge_mid(), h);
    add_zero("bridge.fc2.b", 1, h);

    add("dec.tok_emb", V, h);
    add("dec.pos", cfg_.max_answer_len + 1, h);
    for (int i = 0; i < cfg_.dec_layers; ++i) {
        std::string L = "dec.L" + std::to_string(i) + ".";
        add_attn(L + "self", h);
        add_attn(L + "cross", h);
        add_ffn(L + "ffn", h);
    }
    add("dec.out.w", h, V);
    add_zero("dec.out.b", 1, V);
}

Model Model::clone() const {
    Model copy(cfg_, vocab_);
    for (auto& [name, v] : copy.params_) v->value = params_.at(name)->value;
    return copy;
}

ag::Value Model::p(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("unknown parameter \"" + name + "\"");
    return it->second;
}

void Model::zero_grads() {
    for (auto& [name, v] : params_) v->grad.setZero();
}

ag::Value Model::attention(const std::string& prefix, const ag::Value& q_input,
                           const ag::Value& kv_input, int hidden, bool causal) const {
    const int dh = hidden / cfg_.heads;
    ag::Value Q = ag::add_rowvec(ag::matmul(q_input, p(prefix + ".wq")), p(prefix + ".bq"));
    ag::Value K = ag::add_rowvec(ag::matmul(kv_input, p(prefix + ".wk")), p(prefix + ".bk"));
    ag::Value Vv = ag::add_rowvec(ag::matmul(kv_input, p(prefix + ".wv")), p(prefix + ".bv"));

    Matrix mask;
    if (causal) {
        const Eigen::Index n = q_input->value.rows();
        mask = Matrix::Zero(n, n);
        for (Eigen::Index r = 0; r < n; ++r)
            for (Eigen::Index c = r + 1; c < n; ++c) mask(r, c) = -1e30;
    }

    std::vector<ag::Value> heads;
    for (int head = 0; head < cfg_.heads; ++head) {
        ag::Value Qh = ag::slice_cols(Q, head * dh, dh);
        ag::Value Kh = ag::slice_cols(K, head * dh, dh);
        ag::Value Vh = ag::slice_cols(Vv, head * dh, dh);
        ag::Value scores = ag::scale(ag::matmul_nt(Qh, Kh), 1.0 / std::sqrt(double(dh)));
        if (causal) scores = ag::add_const(scores, mask);
        heads.push_back(ag::matmul(ag::softmax_rows(scores), Vh));
    }
    ag::Value merged = cfg_.heads == 1 ? heads[0] : ag::concat_cols(heads);
    return ag::add_rowvec(ag::matmul(merged, p(prefix + ".wo")), p(prefix + ".bo"));
}

ag::Value Model::attn_ln_block(const std::string& prefix, const ag::Value& x, const ag::Value& kv,
                               int hidden, bool causal) const {
    ag::Value a = attention(prefix, x, kv, hidden, causal);
    return ag::layer_norm_rows(ag::add(x, a), p(prefix + "_ln.gain"), p(prefix + "_ln.bias"));
}

ag::Value Model::ffn_ln_block(const std::string& prefix, const ag::Value& x) const {
    ag::Value mid = ag::relu(ag::add_rowvec(ag::matmul(x, p(prefix + ".w1")), p(prefix + ".b1")));
    ag::Value f = ag::add_rowvec(ag::matmul(mid, p(prefix + ".w2")), p(prefix + ".b2"));
    return ag::layer_norm_rows(ag::add(x, f), p(prefix + "_ln.gain"), p(prefix + "_ln.bias"));
}

MultimodalStates Model::encode_multimodal(const std::vector<int>& question_ids,
                                          const ImageFeatures& features) const {
    if (static_cast<int>(question_ids.size()) != cfg_.L_q)
        throw ValidationError("question must be padded to L_q=" + std::to_string(cfg_.L_q) +
                              " tokens, got " + std::to_string(question_ids.size()));
    if (features.rows() != cfg_.L_v)
        throw ValidationError("expected L_v=" + std::to_string(cfg_.L_v) + " objects, got " +
                              std::to_string(features.rows()));
    if (static_cast<int>(features.object_features.cols()) != cfg_.feat_dim)
        throw ValidationError("expected feat_dim=" + std::to_string(cfg_.feat_dim) + ", got " +
                              std::to_string(features.object_features.cols()));

    ag::Value lang = ag::add(ag::embedding_rows(p("mm.tok_emb"), question_ids), p("mm.pos_l"));
    lang = ag::layer_norm_rows(lang, p("mm.lang_ln.gain"), p("mm.lang_ln.bias"));

    ag::Value feats = ag::constant(features.object_features);
    ag::Value boxes = ag::constant(features.boxes);
    ag::Value vision =
        ag::add(ag::add_rowvec(ag::matmul(feats, p("mm.vis_proj.w")), p("mm.vis_proj.b")),
                ag::add_rowvec(ag::matmul(boxes, p("mm.box_proj.w")), p("mm.box_proj.b")));
    vision = ag::layer_norm_rows(vision, p("mm.vis_ln.gain"), p("mm.vis_ln.bias"));

    for (int i = 0; i < cfg_.mm_layers; ++i) {
        std::string L = "mm.L" + std::to_string(i) + ".";
        ag::Value l1 = attn_ln_block(L + "cross_l", lang, vision, cfg_.h_mm, false);
        ag::Value v1 = attn_ln_block(L + "cross_v", vision, lang, cfg_.h_mm, false);
        ag::Value l2 = attn_ln_block(L + "self_l", l1, l1, cfg_.h_mm, false);
        ag::Value v2 = attn_ln_block(L + "self_v", v1, v1, cfg_.h_mm, false);
        lang = ffn_ln_block(L + "ffn_l", l2);
        vision = ffn_ln_block(L + "ffn_v", v2);
    }
    return MultimodalStates{lang, vision};
}

ag::Value Model::project_multimodal(const MultimodalStates& states) const {
    if (!states.lang || !states.vision) throw ValidationError("multimodal states missing");
    if (states.lang->value.cols() != cfg_.h_mm || states.vision->value.cols() != cfg_.h_mm)
        throw ValidationError("multimodal states do not match h_mm");
    ag::Value X = ag::concat_rows({states.lang, states.vision});
    ag::Value mid =
        ag::relu(ag::add_rowvec(ag::matmul(X, p("bridge.fc1.w")), p("bridge.fc1.b")));
    return ag::add_rowvec(ag::matmul(mid, p("bridge.fc2.w")), p("bridge.fc2.b"));
}

ag::Value Model::encode_textual(const std::vector<int>& stream_ids) const {
    if (static_cast<int>(stream_ids.size()) != cfg_.L_t)
        throw ValidationError("textual stream must be padded to L_t=" + std::to_string(cfg_.L_t) +
                              " tokens, got " + std::to_string(stream_ids.size()));
    ag::Value x = ag::add(ag::embedding_rows(p("txt.tok_emb"), stream_ids), p("txt.pos"));
    x = ag::layer_norm_rows(x, p("txt.emb_ln.gain"), p("txt.emb_ln.bias"));
    for (int i = 0; i < cfg_.txt_layers; ++i) {
        std::string L = "txt.L" + std::to_string(i) + ".";
        x = attn_ln_block(L + "self", x, x, cfg_.h, false);
        x = ffn_ln_block(L + "ffn", x);
    }
    return x;
}

HybridSequence Model::fuse_sequences(const ag::Value& H,
                                     const std::vector<ag::Value>& passage_states) const {
    const bool with_mm = !cfg_.disable_mm_encoder;
    const bool with_txt = !cfg_.disable_txt_encoder;
    if (with_mm && !H) throw ValidationError("multimodal block required but missing");
    if (with_txt && passage_states.empty())
        throw ValidationError("textual blocks required but missing");
    if (with_mm && H->value.rows() != cfg_.L_q + cfg_.L_v)
        throw ValidationError("H must have L_q+L_v rows");
    if (with_mm && H->value.cols() != cfg_.h) throw ValidationError("H must have h columns");

    HybridSequence out;
    std::vector<ag::Value> blocks;
    if (!with_txt) {
        blocks.push_back(H);
        for (int r = 0; r < cfg_.L_q; ++r) out.segments.push_back({RowKind::mm_lang, 0});
        for (int r = 0; r < cfg_.L_v; ++r) out.segments.push_back({RowKind::mm_vision, 0});
    } else {
        for (size_t j = 0; j < passage_states.size(); ++j) {
            const auto& Z = passage_states[j];
            if (Z->value.rows() != cfg_.L_t || Z->value.cols() != cfg_.h)
                throw ValidationError("passage states must be L_t x h");
            if (with_mm) {
                blocks.push_back(H);
                for (int r = 0; r < cfg_.L_q; ++r)
                    out.segments.push_back({RowKind::mm_lang, static_cast<int>(j)});
                for (int r = 0; r < cfg_.L_v; ++r)
                    out.segments.push_back({RowKind::mm_vision, static_cast<int>(j)});
            }
            blocks.push_back(Z);
            for (int r = 0; r < cfg_.L_t; ++r)
                out.segments.push_back({RowKind::textual, static_cast<int>(j)});
        }
    }
    out.embeddings = blocks.size() == 1 ? blocks[0] : ag::concat_rows(blocks);
    return out;
}

AnswerDistribution Model::decode_steps(const HybridSequence& S,
                                       const std::vector<int>& input_ids) const {
    if (!S.embeddings || S.embeddings->value.rows() == 0)
        throw ValidationError("empty hybrid sequence");
    const int n = static_cast<int>(input_ids.size());
    if (n < 1 || n > cfg_.max_answer_len + 1)
        throw ValidationError("decoder input length outside [1, max_answer_len+1]");
    ag::Value x = ag::add(ag::embedding_rows(p("dec.tok_emb"), input_ids),
                          ag::slice_rows(p("dec.pos"), 0, n));
    for (int i = 0; i < cfg_.dec_layers; ++i) {
        std::string L = "dec.L" + std::to_string(i) + ".";
        x = attn_ln_block(L + "self", x, x, cfg_.h, true);
        x = attn_ln_block(L + "cross", x, S.embeddings, cfg_.h, false);
        x = ffn_ln_block(L + "ffn", x);
    }
    AnswerDistribution dist;
    dist.logits = ag::add_rowvec(ag::matmul(x, p("dec.out.w")), p("dec.out.b"));
    dist.probs = ag::softmax_rows(dist.logits);
    dist.steps = n;
    return dist;
}

AnswerDistribution Model::decode_answer(const HybridSequence& S,
                                        const std::vector<int>& gold) const {
    if (gold.empty()) throw ValidationError("teacher forcing needs a nonempty gold sequence");
    std::vector<int> input;
    input.reserve(gold.size());
    input.push_back(Vocabulary::BOS);
    input.insert(input.end(), gold.begin(), gold.end() - 1);
    return decode_steps(S, input);
}

ag::Value Model::compute_loss(const AnswerDistribution& dist, const std::vector<int>& gold) const {
    if (static_cast<int>(gold.size()) != dist.steps)
        throw ValidationError("gold length " + std::to_string(gold.size()) +
                              " does not match distribution length " + std::to_string(dist.steps));
    double divisor = static_cast<double>(dist.steps);
    if (cfg_.loss_mode == "vocab_scaled") divisor *= static_cast<double>(vocab_.size());
    return ag::cross_entropy_rows(dist.logits, gold, divisor);
}

std::string Model::generate(const HybridSequence& S, int max_len) const {
    if (max_len < 1) throw ValidationError("max_len must be at least 1");
    max_len = std::min(max_len, cfg_.max_answer_len);
    std::vector<int> ids = {Vocabulary::BOS};
    std::vector<int> emitted;
    for (int step = 0; step < max_len; ++step) {
        AnswerDistribution dist = decode_steps(S, ids);
        const auto& row = dist.probs->value;
        int best = 0;
        double best_p = row(dist.steps - 1, 0);
        for (int v = 1; v < vocab_.size(); ++v) {
            double pv = row(dist.steps - 1, v);
            if (pv > best_p) {
                best_p = pv;
                best = v;
            }
        }
        if (best == Vocabulary::EOS) break;
        emitted.push_back(best);
        ids.push_back(best);
    }
    return vocab_.decode(emitted);
}

HybridSequence Model::forward_states(const AssembledInput& input,
                                     const ImageFeatures& features) const {
    ag::Value H;
    if (!cfg_.disable_mm_encoder)
        H = project_multimodal(encode_multimodal(input.question_ids, features));
    std::vector<ag::Value> Zs;
    if (!cfg_.disable_txt_encoder) {
        Zs.reserve(input.passages.size());
        for (const auto& stream : input.passages) Zs.push_back(encode_textual(stream));
    }
    return fuse_sequences(H, Zs);
}

ag::Value Model::forward_loss(const AssembledInput& input, const ImageFeatures& features,
                              const std::vector<int>& gold_answer) const {
    HybridSequence S = forward_states(input, features);
    AnswerDistribution dist = decode_answer(S, gold_answer);
    return compute_loss(dist, gold_answer);
}

std::string Model::predict(const AssembledInput& input, const ImageFeatures& features) const {
    return generate(forward_states(input, features), cfg_.max_answer_len);
}

std::vector<int> Model::encode_answer(const std::string& answer) const {
    std::vector<int> ids = vocab_.encode(answer);
    if (static_cast<int>(ids.size()) > cfg_.max_answer_len)
        ids.resize(static_cast<size_t>(cfg_.max_answer_len));
    ids.push_back(Vocabulary::EOS);
    return ids;
}

namespace {

constexpr char kCheckpointMagic[4] = {'T', 'W', 'O', '1'};

json config_to_json(const ModelConfig& c) {
    return json{{"h", c.h},
                {"h_mm", c.h_mm},
                {"h_mid", c.h_mid},
                {"L_q", c.L_q},
                {"L_v", c.L_v},
                {"L_t", c.L_t},
                {"k", c.k},
                {"feat_dim", c.feat_dim},
                {"heads", c.heads},
                {"mm_layers", c.mm_layers},
                {"txt_layers", c.txt_layers},
                {"dec_layers", c.dec_layers},
                {"max_answer_len", c.max_answer_len},
                {"disable_mm_encoder", c.disable_mm_encoder},
                {"disable_txt_encoder", c.disable_txt_encoder},
                {"include_implicit_textual", c.include_implicit_textual},
                {"include_implicit_multimodal", c.include_implicit_multimodal},
                {"loss_mode", c.loss_mode},
                {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.h = j.at("h").get<int>();
    c.h_mm = j.at("h_mm").get<int>();
    c.h_mid = j.at("h_mid").get<int>();
    c.L_q = j.at("L_q").get<int>();
    c.L_v = j.at("L_v").get<int>();
    c.L_t = j.at("L_t").get<int>();
    c.k = j.at("k").get<int>();
    c.feat_dim = j.at("feat_dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.mm_layers = j.at("mm_layers").get<int>();
    c.txt_layers = j.at("txt_layers").get<int>();
    c.dec_layers = j.at("dec_layers").get<int>();
    c.max_answer_len = j.at("max_answer_len").get<int>();
    c.disable_mm_encoder = j.at("disable_mm_encoder").get<bool>();
    c.disable_txt_encoder = j.at("disable_txt_encoder").get<bool>();
    c.include_implicit_textual = j.at("include_implicit_textual").get<bool>();
    c.include_implicit_multimodal = j.at("include_implicit_multimodal").get<bool>();
    c.loss_mode = j.at("loss_mode").get<std::string>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

void write_tensor(std::ostream& os, const std::string& name, const Matrix& m) {
    write_lp_string(os, name);
    write_u32(os, static_cast<uint32_t>(m.rows()));
    write_u32(os, static_cast<uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) write_f64(os, m(r, c));
}

std::pair<std::string, Matrix> read_tensor(std::istream& is, const std::string& path) {
    std::string name = read_lp_string(is, path);
    uint32_t rows = read_u32(is, path);
    uint32_t cols = read_u32(is, path);
    Matrix m(rows, cols);
    for (uint32_t r = 0; r < rows; ++r)
        for (uint32_t c = 0; c < cols; ++c) m(r, c) = read_f64(is, path);
    return {std::move(name), std::move(m)};
}

}  // namespace

void save_checkpoint(const Model& model, const CheckpointExtra& extra, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kCheckpointMagic, 4);
    json header;
    header["config"] = config_to_json(model.config());
    header["vocab"] = model.vocab().id_to_token;
    header["stage"] = extra.stage;
    header["step"] = extra.step;
    header["opt_t"] = extra.opt_t;
    header["meta"] = extra.meta_json;
    write_lp_string(os, header.dump());

    uint32_t count = static_cast<uint32_t>(model.params().size() + extra.opt_m.size() +
                                           extra.opt_v.size());
    write_u32(os, count);
    for (const auto& [name, v] : model.params()) write_tensor(os, name, v->value);
    for (const auto& [name, m] : extra.opt_m) write_tensor(os, "opt.m." + name, m);
    for (const auto& [name, m] : extra.opt_v) write_tensor(os, "opt.v." + name, m);
    if (!os) throw IoError("write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw ValidationError(path + ": not a checkpoint (bad magic)");
    json header = json::parse(read_lp_string(is, path), nullptr, false);
    if (header.is_discarded()) throw ValidationError(path + ": malformed checkpoint header");

    ModelConfig cfg = config_from_json(header.at("config"));
    Vocabulary vocab = Vocabulary::from_tokens(header.at("vocab").get<std::vector<std::string>>());
    LoadedCheckpoint out{Model(cfg, vocab), CheckpointExtra{}};
    out.extra.stage = header.value("stage", std::string());
    out.extra.step = header.value("step", static_cast<int64_t>(0));
    out.extra.opt_t = header.value("opt_t", static_cast<int64_t>(0));
    out.extra.meta_json = header.value("meta", std::string());

    uint32_t count = read_u32(is, path);
    size_t loaded_params = 0;
    for (uint32_t i = 0; i < count; ++i) {
        auto [name, m] = read_tensor(is, path);
        if (name.rfind("opt.m.", 0) == 0) {
            out.extra.opt_m[name.substr(6)] = std::move(m);
        } else if (name.rfind("opt.v.", 0) == 0) {
            out.extra.opt_v[name.substr(6)] = std::move(m);
        } else {
            auto it = out.model.params().find(name);
            if (it == out.model.params().end())
                throw ValidationError(path + ": unknown tensor \"" + name + "\"");
            if (it->second->value.rows() != m.rows() || it->second->value.cols() != m.cols())
                throw ValidationError(path + ": tensor \"" + name + "\" has the wrong shape");
            it->second->value = std::move(m);
            ++loaded_params;
        }
    }
    if (loaded_params != out.model.params().size())
        throw ValidationError(path + ": checkpoint is missing parameter tensors");
    return out;
}

}  // namespace two
