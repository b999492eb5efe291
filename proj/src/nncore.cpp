#include "fedsac/nncore.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

namespace fedsac {

std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::softmax: return "softmax";
        case Activation::identity: return "identity";
    }
    return "identity";
}

Activation activation_from_string(std::string_view s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "softmax") return Activation::softmax;
    if (s == "identity") return Activation::identity;
    throw ShapeError("unknown activation '" + std::string(s) + "'");
}

void validate_manifest(const Manifest& manifest) {
    if (manifest.empty()) throw ShapeError("manifest has no layers");
    for (std::size_t k = 0; k < manifest.size(); ++k) {
        const auto& l = manifest[k];
        if (l.in_dim < 1 || l.out_dim < 1)
            throw ShapeError("layer " + std::to_string(k) + " has non-positive dims");
        if (k > 0 && manifest[k - 1].out_dim != l.in_dim)
            throw ShapeError("layer " + std::to_string(k) + " in_dim " + std::to_string(l.in_dim) +
                             " does not match previous out_dim " + std::to_string(manifest[k - 1].out_dim));
        if (l.activation == Activation::softmax && k + 1 != manifest.size())
            throw ShapeError("softmax on non-final layer " + std::to_string(k));
    }
}

std::size_t param_count(const Manifest& manifest) {
    std::size_t d = 0;
    for (const auto& l : manifest) d += l.param_count();
    return d;
}

Manifest mlp_manifest(std::span<const int> widths, Activation hidden, Activation output) {
    if (widths.size() < 2) throw ShapeError("an MLP needs at least input and output widths");
    Manifest m;
    for (std::size_t k = 0; k + 1 < widths.size(); ++k)
        m.push_back({widths[k], widths[k + 1], k + 2 == widths.size() ? output : hidden});
    validate_manifest(m);
    return m;
}

FlatParams::FlatParams(Manifest m, Vector v) : manifest(std::move(m)), values(std::move(v)) {
    validate_manifest(manifest);
    if (static_cast<std::size_t>(values.size()) != param_count(manifest))
        throw ShapeError("parameter vector length " + std::to_string(values.size()) +
                         " does not match manifest count " + std::to_string(param_count(manifest)));
}

FlatParams::FlatParams(Manifest m) : manifest(std::move(m)) {
    validate_manifest(manifest);
    values = Vector::Zero(static_cast<Eigen::Index>(param_count(manifest)));
}

std::size_t FlatParams::layer_offset(std::size_t k) const {
    std::size_t off = 0;
    for (std::size_t j = 0; j < k; ++j) off += manifest.at(j).param_count();
    return off;
}

Eigen::Map<const Matrix> FlatParams::weights(std::size_t k) const {
    const auto& l = manifest.at(k);
    return {values.data() + layer_offset(k), l.out_dim, l.in_dim};
}

Eigen::Map<Matrix> FlatParams::weights(std::size_t k) {
    const auto& l = manifest.at(k);
    return {values.data() + layer_offset(k), l.out_dim, l.in_dim};
}

Eigen::Map<const Vector> FlatParams::bias(std::size_t k) const {
    const auto& l = manifest.at(k);
    return {values.data() + layer_offset(k) + static_cast<std::size_t>(l.in_dim) * l.out_dim, l.out_dim};
}

Eigen::Map<Vector> FlatParams::bias(std::size_t k) {
    const auto& l = manifest.at(k);
    return {values.data() + layer_offset(k) + static_cast<std::size_t>(l.in_dim) * l.out_dim, l.out_dim};
}

FlatParams init_params(const Manifest& manifest, std::uint64_t seed) {
    FlatParams p(manifest);
    Rng rng(seed);
    for (std::size_t k = 0; k < manifest.size(); ++k) {
        const auto& l = manifest[k];
        const double limit = std::sqrt(6.0 / (l.in_dim + l.out_dim));
        std::uniform_real_distribution<double> u(-limit, limit);
        auto w = p.weights(k);
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    }
    return p;
}

std::vector<DenseLayer> unflatten(const FlatParams& params) {
    std::vector<DenseLayer> layers;
    layers.reserve(params.manifest.size());
    for (std::size_t k = 0; k < params.manifest.size(); ++k)
        layers.push_back({params.weights(k), params.bias(k)});
    return layers;
}

FlatParams flatten(const Manifest& manifest, const std::vector<DenseLayer>& layers) {
    if (layers.size() != manifest.size()) throw ShapeError("layer count does not match manifest");
    FlatParams p(manifest);
    for (std::size_t k = 0; k < manifest.size(); ++k) {
        const auto& l = manifest[k];
        if (layers[k].weights.rows() != l.out_dim || layers[k].weights.cols() != l.in_dim ||
            layers[k].bias.size() != l.out_dim)
            throw ShapeError("layer " + std::to_string(k) + " shape does not match manifest");
        p.weights(k) = layers[k].weights;
        p.bias(k) = layers[k].bias;
    }
    return p;
}

namespace {

void softmax_rows(Matrix& z) {
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        auto row = z.row(r);
        row.array() -= row.maxCoeff();
        row = row.array().exp().matrix();
        row /= row.sum();
    }
}

void apply_activation(Matrix& z, Activation a) {
    switch (a) {
        case Activation::relu: z = z.cwiseMax(0.0); break;
        case Activation::tanh: z = z.array().tanh().matrix(); break;
        case Activation::softmax: softmax_rows(z); break;
        case Activation::identity: break;
    }
}

Matrix layer_preactivation(const FlatParams& params, std::size_t k, const Matrix& x) {
    Matrix z = x * params.weights(k).transpose();
    z.rowwise() += params.bias(k).transpose();
    return z;
}

void check_input_width(const FlatParams& params, const Matrix& inputs) {
    if (params.manifest.empty()) throw ShapeError("parameters have an empty manifest");
    const int want = params.manifest.front().in_dim;
    if (inputs.cols() != want)
        throw ShapeError("input width " + std::to_string(inputs.cols()) + " does not match first layer in_dim " +
                         std::to_string(want));
}

void check_finite(const Matrix& m, std::size_t layer) {
    if (!m.allFinite()) throw NumericError("non-finite activation in layer " + std::to_string(layer));
}

}  // namespace

Matrix forward(const FlatParams& params, const Matrix& inputs) {
    check_input_width(params, inputs);
    Matrix x = inputs;
    for (std::size_t k = 0; k < params.manifest.size(); ++k) {
        Matrix z = layer_preactivation(params, k, x);
        apply_activation(z, params.manifest[k].activation);
        x = std::move(z);
    }
    return x;
}

ForwardTrace forward_trace(const FlatParams& params, const Matrix& inputs) {
    check_input_width(params, inputs);
    ForwardTrace t;
    t.inputs.reserve(params.manifest.size());
    t.outputs.reserve(params.manifest.size());
    const Matrix* x = &inputs;
    for (std::size_t k = 0; k < params.manifest.size(); ++k) {
        t.inputs.push_back(*x);
        Matrix z = layer_preactivation(params, k, *x);
        apply_activation(z, params.manifest[k].activation);
        check_finite(z, k);
        t.outputs.push_back(std::move(z));
        x = &t.outputs.back();
    }
    return t;
}

Matrix backward(const FlatParams& params, const ForwardTrace& trace, const Matrix& grad_output,
                Vector& grad_params, bool wrt_preactivation) {
    if (static_cast<std::size_t>(grad_params.size()) != params.size())
        throw ShapeError("gradient buffer length does not match parameters");
    const std::size_t L = params.manifest.size();
    Matrix g = grad_output;
    for (std::size_t k = L; k-- > 0;) {
        const auto& spec = params.manifest[k];
        const Matrix& y = trace.outputs[k];
        if (!(wrt_preactivation && k + 1 == L)) {
            switch (spec.activation) {
                case Activation::relu: g = g.cwiseProduct((y.array() > 0.0).cast<double>().matrix()); break;
                case Activation::tanh: g = g.cwiseProduct((1.0 - y.array().square()).matrix()); break;
                case Activation::softmax: {
                    Vector dots = g.cwiseProduct(y).rowwise().sum();
                    g = y.cwiseProduct(g - dots.replicate(1, g.cols()));
                    break;
                }
                case Activation::identity: break;
            }
        }
        const std::size_t off = params.layer_offset(k);
        Eigen::Map<Matrix> gw(grad_params.data() + off, spec.out_dim, spec.in_dim);
        Eigen::Map<Vector> gb(grad_params.data() + off + static_cast<std::size_t>(spec.in_dim) * spec.out_dim,
                              spec.out_dim);
        gw.noalias() += g.transpose() * trace.inputs[k];
        gb += g.colwise().sum().transpose();
        Matrix gx = g * params.weights(k);
        if (!gx.allFinite()) throw NumericError("non-finite gradient in layer " + std::to_string(k));
        g = std::move(gx);
    }
    return g;
}

std::pair<double, Gradients> loss_and_grad(const FlatParams& params, const Batch& batch, LossKind kind) {
    const auto B = static_cast<Eigen::Index>(batch.size());
    if (B == 0) throw ShapeError("empty batch");
    if (batch.inputs.rows() != B) throw ShapeError("batch inputs and labels disagree on row count");
    const int C = params.manifest.back().out_dim;
    for (int label : batch.labels)
        if (label < 0 || label >= C)
            throw ShapeError("label " + std::to_string(label) + " outside [0, " + std::to_string(C) + ")");

    if (kind == LossKind::mse) {
        Matrix onehot = Matrix::Zero(B, C);
        for (Eigen::Index i = 0; i < B; ++i) onehot(i, batch.labels[static_cast<std::size_t>(i)]) = 1.0;
        return mse_loss_and_grad(params, batch.inputs, onehot);
    }

    // Cross-entropy from the last layer's logits. The trace stores post-softmax
    // outputs, so the logits are recomputed from the last layer's input.
    ForwardTrace trace = forward_trace(params, batch.inputs);
    const std::size_t last = params.manifest.size() - 1;
    Matrix logits = layer_preactivation(params, last, trace.inputs[last]);
    double loss = 0.0;
    Matrix grad(B, C);
    for (Eigen::Index i = 0; i < B; ++i) {
        auto row = logits.row(i);
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        const int y = batch.labels[static_cast<std::size_t>(i)];
        loss += lse - row(y);
        grad.row(i) = (row.array() - lse).exp().matrix();
        grad(i, y) -= 1.0;
    }
    loss /= static_cast<double>(B);
    grad /= static_cast<double>(B);
    if (!std::isfinite(loss)) throw NumericError("non-finite cross-entropy in layer " + std::to_string(last));
    Gradients g{Vector::Zero(static_cast<Eigen::Index>(params.size()))};
    backward(params, trace, grad, g.values, /*wrt_preactivation=*/true);
    return {loss, std::move(g)};
}

std::pair<double, Gradients> mse_loss_and_grad(const FlatParams& params, const Matrix& inputs,
                                               const Matrix& targets) {
    if (inputs.rows() == 0) throw ShapeError("empty batch");
    ForwardTrace trace = forward_trace(params, inputs);
    const Matrix& out = trace.result();
    if (targets.rows() != out.rows() || targets.cols() != out.cols())
        throw ShapeError("target shape " + std::to_string(targets.rows()) + "x" + std::to_string(targets.cols()) +
                         " does not match output " + std::to_string(out.rows()) + "x" + std::to_string(out.cols()));
    const Matrix diff = out - targets;
    const double n = static_cast<double>(diff.size());
    const double loss = diff.squaredNorm() / n;
    if (!std::isfinite(loss))
        throw NumericError("non-finite mse in layer " + std::to_string(params.manifest.size() - 1));
    Gradients g{Vector::Zero(static_cast<Eigen::Index>(params.size()))};
    backward(params, trace, (2.0 / n) * diff, g.values);
    return {loss, std::move(g)};
}

FlatParams sgd_step(const FlatParams& params, const Gradients& grads, double lr) {
    if (grads.values.size() != params.values.size())
        throw ShapeError("gradient length " + std::to_string(grads.values.size()) + " does not match parameters " +
                         std::to_string(params.values.size()));
    FlatParams out = params;
    out.values -= lr * grads.values;
    return out;
}

double mse_vec(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw ShapeError("mse_vec length mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    if (a.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

Adam::Adam(std::size_t size, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
      m_(Vector::Zero(static_cast<Eigen::Index>(size))), v_(Vector::Zero(static_cast<Eigen::Index>(size))) {}

void Adam::step(Vector& values, const Vector& grad) {
    if (grad.size() != m_.size() || values.size() != m_.size()) throw ShapeError("Adam state size mismatch");
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    values.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

// ---------------------------------------------------------------------------
// checkpoints

nlohmann::json manifest_to_json(const Manifest& manifest) {
    auto arr = nlohmann::json::array();
    for (const auto& l : manifest)
        arr.push_back({{"in", l.in_dim}, {"out", l.out_dim}, {"activation", to_string(l.activation)}});
    return arr;
}

Manifest manifest_from_json(const nlohmann::json& j) {
    Manifest m;
    for (const auto& e : j)
        m.push_back({e.at("in").get<int>(), e.at("out").get<int>(),
                     activation_from_string(e.at("activation").get<std::string>())});
    validate_manifest(m);
    return m;
}

const Checkpoint::Section& Checkpoint::at(std::string_view name) const {
    for (const auto& s : sections)
        if (s.name == name) return s;
    throw FormatError("checkpoint has no section '" + std::string(name) + "'");
}

namespace {

void put_le_double(std::ostream& os, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    os.write(buf, 8);
}

double get_le_double(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open checkpoint for writing: " + path.string());
    for (const auto& s : ckpt.sections) {
        nlohmann::json header = {{"name", s.name},
                                 {"manifest", manifest_to_json(s.params.manifest)},
                                 {"d", s.params.size()},
                                 {"seed", s.seed},
                                 {"meta", nlohmann::json::parse(s.meta_json)}};
        os << header.dump() << '\n';
        for (Eigen::Index i = 0; i < s.params.values.size(); ++i) put_le_double(os, s.params.values[i]);
    }
    if (!os) throw FormatError("write failed: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    Checkpoint ckpt;
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        const auto nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw FormatError("checkpoint header without newline");
        nlohmann::json header;
        try {
            header = nlohmann::json::parse(bytes.substr(pos, nl - pos));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("bad checkpoint header: ") + e.what());
        }
        pos = nl + 1;
        Checkpoint::Section s;
        s.name = header.value("name", std::string("params"));
        s.seed = header.value("seed", std::uint64_t{0});
        s.meta_json = header.contains("meta") ? header["meta"].dump() : "{}";
        const Manifest m = manifest_from_json(header.at("manifest"));
        const auto d = header.at("d").get<std::size_t>();
        if (d != param_count(m)) throw FormatError("checkpoint d does not match its manifest");
        if (bytes.size() - pos < d * 8) throw FormatError("checkpoint truncated in section '" + s.name + "'");
        Vector v(static_cast<Eigen::Index>(d));
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
        for (std::size_t i = 0; i < d; ++i) v[static_cast<Eigen::Index>(i)] = get_le_double(p + 8 * i);
        pos += d * 8;
        s.params = FlatParams(m, std::move(v));
        ckpt.sections.push_back(std::move(s));
    }
    return ckpt;
}

}  // namespace fedsac
