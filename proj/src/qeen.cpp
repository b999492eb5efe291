#include "fedsac/qeen.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fedsac {

QeenLosses qeen_losses(std::span<const FlatParams> originals, std::span<const FlatParams> decoded,
                       std::span<const double> marks, std::span<const double> predictions) {
    if (originals.size() != decoded.size() || originals.size() != marks.size() ||
        marks.size() != predictions.size())
        throw ShapeError("qeen_losses: list lengths differ");
    if (originals.empty()) throw ShapeError("qeen_losses: empty model list");
    QeenLosses out;
    for (std::size_t i = 0; i < originals.size(); ++i) out.l1 += mse_vec(decoded[i].values, originals[i].values);
    out.l1 /= static_cast<double>(originals.size());
    out.l2 = mse_vec(predictions, marks);
    return out;
}

Qeen::Qeen(const Manifest& client_manifest, QeenConfig cfg, std::uint64_t seed)
    : client_manifest_(client_manifest), cfg_(cfg) {
    validate_manifest(client_manifest_);
    const int d = static_cast<int>(fedsac::param_count(client_manifest_));
    encoder_ = init_params(mlp_manifest({d, cfg_.hidden, cfg_.embedding}, Activation::relu, Activation::identity),
                           derive_seed(seed, "qeen.encoder"));
    for (std::size_t k = 0; k < client_manifest_.size(); ++k) {
        const int out = static_cast<int>(client_manifest_[k].param_count());
        decoder_heads_.push_back(init_params({LayerSpec{cfg_.embedding, out, Activation::identity}},
                                             derive_seed(seed, "qeen.decoder", k)));
    }
    quality_head_ =
        init_params(mlp_manifest({cfg_.embedding, cfg_.quality_hidden, 1}, Activation::relu, Activation::identity),
                    derive_seed(seed, "qeen.quality"));
}

Matrix stack_rows(std::span<const FlatParams> models) {
    if (models.empty()) return {};
    Matrix m(static_cast<Eigen::Index>(models.size()), static_cast<Eigen::Index>(models.front().size()));
    for (std::size_t i = 0; i < models.size(); ++i) {
        if (models[i].size() != models.front().size()) throw ShapeError("stack_rows: models differ in size");
        m.row(static_cast<Eigen::Index>(i)) = models[i].values.transpose();
    }
    return m;
}

Matrix Qeen::encode_rows(const Matrix& params_rows) const { return forward(encoder_, params_rows); }

Embedding Qeen::encode(const FlatParams& params) const {
    if (params.size() != static_cast<std::size_t>(encoder_.manifest.front().in_dim))
        throw ShapeError("QEEN expects " + std::to_string(encoder_.manifest.front().in_dim) + " parameters, got " +
                         std::to_string(params.size()));
    Matrix row = params.values.transpose();
    return forward(encoder_, row).row(0).transpose();
}

FlatParams Qeen::decode(const Embedding& e) const {
    if (e.size() != cfg_.embedding)
        throw ShapeError("embedding length " + std::to_string(e.size()) + " != " + std::to_string(cfg_.embedding));
    FlatParams out(client_manifest_);
    Matrix row = e.transpose();
    for (std::size_t k = 0; k < decoder_heads_.size(); ++k) {
        Matrix slice = forward(decoder_heads_[k], row);
        out.values.segment(static_cast<Eigen::Index>(out.layer_offset(k)), slice.cols()) = slice.row(0).transpose();
    }
    return out;
}

double Qeen::quality_score(const Embedding& e) const {
    if (e.size() != cfg_.embedding)
        throw ShapeError("embedding length " + std::to_string(e.size()) + " != " + std::to_string(cfg_.embedding));
    Matrix row = e.transpose();
    return forward(quality_head_, row)(0, 0);
}

QeenLosses Qeen::losses(std::span<const FlatParams> models, std::span<const double> marks) const {
    if (models.size() != marks.size()) throw ShapeError("qeen losses: model and mark counts differ");
    std::vector<FlatParams> decoded;
    std::vector<double> preds;
    for (const auto& m : models) {
        const Embedding e = encode(m);
        decoded.push_back(decode(e));
        preds.push_back(quality_score(e));
    }
    return qeen_losses(models, decoded, marks, preds);
}

Qeen::StepStats Qeen::joint_gradient(const Matrix& params_rows, const Vector& marks, double lambda1, double lambda2,
                                     Grads& grads) const {
    const auto B = params_rows.rows();
    if (B == 0 || marks.size() != B) throw ShapeError("joint_gradient: batch and marks disagree");
    grads.encoder = Vector::Zero(static_cast<Eigen::Index>(encoder_.size()));
    grads.decoder_heads.assign(decoder_heads_.size(), Vector());
    for (std::size_t k = 0; k < decoder_heads_.size(); ++k)
        grads.decoder_heads[k] = Vector::Zero(static_cast<Eigen::Index>(decoder_heads_[k].size()));
    grads.quality_head = Vector::Zero(static_cast<Eigen::Index>(quality_head_.size()));

    const ForwardTrace enc = forward_trace(encoder_, params_rows);
    const Matrix& emb = enc.result();
    Matrix g_emb = Matrix::Zero(B, emb.cols());
    StepStats s;

    const double n_elems = static_cast<double>(B) * static_cast<double>(params_rows.cols());
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < decoder_heads_.size(); ++k) {
        const ForwardTrace tr = forward_trace(decoder_heads_[k], emb);
        const Eigen::Index width = tr.result().cols();
        const Matrix diff = tr.result() - params_rows.middleCols(off, width);
        s.l1 += diff.squaredNorm();
        if (lambda1 != 0.0) g_emb += backward(decoder_heads_[k], tr, (2.0 * lambda1 / n_elems) * diff, grads.decoder_heads[k]);
        off += width;
    }
    s.l1 /= n_elems;

    const ForwardTrace q = forward_trace(quality_head_, emb);
    const Matrix qdiff = q.result().col(0) - marks;
    s.l2 = qdiff.squaredNorm() / static_cast<double>(B);
    if (lambda2 != 0.0)
        g_emb += backward(quality_head_, q, (2.0 * lambda2 / static_cast<double>(B)) * qdiff, grads.quality_head);

    backward(encoder_, enc, g_emb, grads.encoder);
    s.joint = lambda1 * s.l1 + lambda2 * s.l2;
    return s;
}

std::size_t Qeen::param_count() const {
    std::size_t n = encoder_.size() + quality_head_.size();
    for (const auto& h : decoder_heads_) n += h.size();
    return n;
}

void Qeen::save(const std::filesystem::path& path, std::uint64_t seed) const {
    nlohmann::json meta = {{"client_manifest", manifest_to_json(client_manifest_)},
                           {"hidden", cfg_.hidden},
                           {"embedding", cfg_.embedding},
                           {"quality_hidden", cfg_.quality_hidden}};
    Checkpoint ck;
    ck.sections.push_back({"encoder", encoder_, seed, meta.dump()});
    for (std::size_t k = 0; k < decoder_heads_.size(); ++k)
        ck.sections.push_back({"decoder." + std::to_string(k), decoder_heads_[k], seed, "{}"});
    ck.sections.push_back({"quality", quality_head_, seed, "{}"});
    write_checkpoint(path, ck);
}

Qeen Qeen::load(const std::filesystem::path& path) {
    const Checkpoint ck = read_checkpoint(path);
    const auto& enc = ck.at("encoder");
    const auto meta = nlohmann::json::parse(enc.meta_json);
    Qeen q;
    q.client_manifest_ = manifest_from_json(meta.at("client_manifest"));
    q.cfg_ = {meta.at("hidden").get<int>(), meta.at("embedding").get<int>(), meta.at("quality_hidden").get<int>()};
    q.encoder_ = enc.params;
    for (std::size_t k = 0; k < q.client_manifest_.size(); ++k)
        q.decoder_heads_.push_back(ck.at("decoder." + std::to_string(k)).params);
    q.quality_head_ = ck.at("quality").params;
    if (q.encoder_.manifest.front().in_dim != static_cast<int>(fedsac::param_count(q.client_manifest_)))
        throw FormatError("QEEN checkpoint encoder width does not match its client manifest");
    return q;
}

std::vector<double> normalize_scores(std::span<const double> scores) {
    if (scores.empty()) throw ShapeError("normalize_scores on an empty list");
    const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
    const double range = *hi - *lo;
    std::vector<double> out(scores.size(), 0.5);
    if (range <= 0.0) return out;
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - *lo) / range;
    return out;
}

QeenCorpus generate_corpus(Federation& fed, const CorpusConfig& cfg, std::uint64_t seed) {
    const std::size_t N = fed.config().clients;
    DefectSpec half = cfg.defects;
    half.m = N / 2;
    half.seed = derive_seed(seed, "corpus.plan");
    QeenCorpus corpus;
    corpus.reserve(cfg.models);
    const std::size_t per_lineage = std::max<std::size_t>(cfg.rounds_per_lineage, 1);
    for (std::size_t g = 0; corpus.size() < cfg.models; ++g) {
        if (g % per_lineage == 0) fed.reset(derive_seed(seed, "corpus.lineage", g / per_lineage));
        const DefectPlan plan = draw_plan(half, N, g);
        RoundUploads clean;
        clean.round = g;
        for (std::size_t id = 0; id < N && corpus.size() < cfg.models; ++id) {
            const auto& client = fed.clients()[id];
            LocalUpdate u = local_train(client, fed.train_data(), fed.global_params(), fed.config().local, plan,
                                        derive_seed(seed, "corpus.local", g, id));
            if (plan.is_defective(id)) {
                if (plan.has(DefectKind::comm_loss)) {
                    Rng rng = make_rng(seed, "corpus.comm", g, id);
                    u.params = perturb_comm(u.params, plan.degree, rng);
                }
            } else {
                clean.params.push_back(u.params);
            }
            corpus.push_back({std::move(u.params), ground_truth_mark(id, plan).value});
        }
        if (!clean.params.empty()) fed.commit(clean, fedavg_weights(clean.params.size()));
    }
    fed.reset(0);
    return corpus;
}

Qeen train_qeen(const QeenCorpus& corpus, const QeenConfig& cfg, const QeenTrainConfig& train, std::uint64_t seed,
                QeenTrainLog* log) {
    if (corpus.empty()) throw ConfigError("QEEN corpus is empty");
    if (train.lambda1 < 0.0 || train.lambda2 < 0.0) throw ConfigError("QEEN loss weights must be non-negative");
    if (train.weight_decay < 0.0 || train.lr * train.weight_decay >= 1.0) throw ConfigError("QEEN weight decay out of range");
    Qeen q(corpus.front().params.manifest, cfg, seed);

    std::vector<FlatParams> models;
    Vector marks(static_cast<Eigen::Index>(corpus.size()));
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        models.push_back(corpus[i].params);
        marks[static_cast<Eigen::Index>(i)] = corpus[i].mark;
    }
    const Matrix all = stack_rows(models);

    Adam enc_opt(q.encoder().size(), train.lr);
    std::vector<Adam> head_opt;
    for (const auto& h : q.decoder_heads()) head_opt.emplace_back(h.size(), train.lr);
    Adam quality_opt(q.quality_head().size(), train.lr);

    Rng rng = make_rng(seed, "qeen.batches");
    std::vector<Eigen::Index> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    const auto bs = static_cast<std::size_t>(std::max(train.batch_size, 1));
    Qeen::Grads grads;
    std::size_t step = 0;
    for (int epoch = 0; epoch < train.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t len = std::min(bs, order.size() - start);
            Matrix xb(static_cast<Eigen::Index>(len), all.cols());
            Vector mb(static_cast<Eigen::Index>(len));
            for (std::size_t i = 0; i < len; ++i) {
                xb.row(static_cast<Eigen::Index>(i)) = all.row(order[start + i]);
                mb[static_cast<Eigen::Index>(i)] = marks[order[start + i]];
            }
            Qeen::StepStats s;
            try {
                s = q.joint_gradient(xb, mb, train.lambda1, train.lambda2, grads);
            } catch (const NumericError& e) {
                throw NumericError("QEEN training diverged at step " + std::to_string(step) + ": " + e.what());
            }
            if (!std::isfinite(s.joint))
                throw NumericError("QEEN training diverged at step " + std::to_string(step));
            enc_opt.step(q.encoder(), grads.encoder);
            for (std::size_t k = 0; k < head_opt.size(); ++k) head_opt[k].step(q.decoder_heads()[k], grads.decoder_heads[k]);
            quality_opt.step(q.quality_head(), grads.quality_head);
            if (train.weight_decay > 0.0) {
                const double shrink = 1.0 - train.lr * train.weight_decay;
                q.encoder().values *= shrink;
                if (train.lambda1 > 0.0)
                    for (auto& h : q.decoder_heads()) h.values *= shrink;
                if (train.lambda2 > 0.0) q.quality_head().values *= shrink;
            }
            if (log) {
                log->joint.push_back(s.joint);
                log->l1.push_back(s.l1);
                log->l2.push_back(s.l2);
            }
            ++step;
        }
        if (epoch % 10 == 0 || epoch + 1 == train.epochs)
            spdlog::debug("qeen epoch {} step {}: l1 {:.6f} l2 {:.6f}", epoch, step, log ? log->l1.back() : 0.0,
                          log ? log->l2.back() : 0.0);
    }
    return q;
}

}  // namespace fedsac
