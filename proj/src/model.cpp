#include "mdseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mdseg/error.hpp"

namespace mdseg {

void ModelConfig::validate() const {
    if (expansion < 1) throw ConfigError("head expansion must be >= 1");
    if (input_dim < 1 || embed_dim < 1 || ctx_dim < 1 || num_classes < 2)
        throw ConfigError("model dimensions must be positive");
    if (window % 2 == 0) throw ConfigError("window size must be odd");
    if (mixup_alpha <= 0.0) throw ConfigError("mixup alpha must be > 0");
}

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng) {
    // uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out))
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<double> wd(in * out);
    for (double& v : wd) v = rng.uniform(-bound, bound);
    Linear l;
    l.w = Tensor::from({in, out}, std::move(wd), true);
    l.b = Tensor::zeros({1, out}, true);
    return l;
}

Linear Linear::zeros(std::size_t in, std::size_t out) {
    Linear l;
    l.w = Tensor::zeros({in, out}, true);
    l.b = Tensor::zeros({1, out}, true);
    return l;
}

Tensor Linear::forward(const Tensor& x) const { return add(matmul(x, w), b); }

PromptNorm PromptNorm::create(std::size_t feat_dim, std::size_t ctx_dim, bool enabled) {
    PromptNorm pn;
    pn.base = NormState::create(feat_dim);
    pn.scale_gen = Linear::zeros(ctx_dim, feat_dim);
    pn.shift_gen = Linear::zeros(ctx_dim, feat_dim);
    pn.enabled = enabled;
    return pn;
}

Tensor prompt_norm_forward(const Tensor& x, int dataset_id, PromptNorm& layer,
                           const Tensor& ctx_table, NormMode mode) {
    Tensor y = batch_norm(x, layer.base, mode);
    if (!layer.enabled) return y;
    if (dataset_id < 0 || static_cast<std::size_t>(dataset_id) >= ctx_table.dim(0))
        throw ConfigError("dataset id " + std::to_string(dataset_id) +
                          " not present in the context table (" +
                          std::to_string(ctx_table.dim(0)) + " datasets)");
    const Tensor ctx = gather_rows(ctx_table, {static_cast<std::size_t>(dataset_id)});
    const Tensor ones = Tensor::full({1, x.dim(1)}, 1.0);
    const Tensor scale = add(layer.scale_gen.forward(ctx), ones);
    const Tensor shift = layer.shift_gen.forward(ctx);
    return add(mul(y, scale), shift);
}

MixupResult manifold_mixup(const Tensor& features, const std::vector<double>& targets,
                           const std::vector<bool>& ignore_mask, double alpha, Rng& rng) {
    if (features.rank() != 2)
        throw DimensionError("manifold_mixup expects 2-D features, got " +
                             shape_str(features.shape()));
    const std::size_t n = features.dim(0);
    if (ignore_mask.size() != n || targets.size() % n != 0)
        throw DimensionError("manifold_mixup: targets/mask do not match feature rows");
    const std::size_t k = targets.size() / n;

    std::vector<std::size_t> valid;
    for (std::size_t i = 0; i < n; ++i)
        if (!ignore_mask[i]) valid.push_back(i);

    MixupResult res;
    if (valid.size() < 2) {
        res.features = features;
        res.targets = targets;
        return res;
    }

    const double lambda = rng.beta(alpha, alpha);
    std::vector<std::size_t> partner(n);
    for (std::size_t i = 0; i < n; ++i) partner[i] = i;
    const auto perm = rng.permutation(valid.size());
    for (std::size_t i = 0; i < valid.size(); ++i) partner[valid[i]] = valid[perm[i]];

    res.features =
        add(scalar_mul(features, lambda),
            scalar_mul(gather_rows(features, partner), 1.0 - lambda));
    res.targets.resize(targets.size());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < k; ++c)
            res.targets[i * k + c] =
                lambda * targets[i * k + c] + (1.0 - lambda) * targets[partner[i] * k + c];
    res.lambda = lambda;
    res.applied = true;
    return res;
}

Model::Model(const ModelConfig& cfg, std::size_t num_datasets, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    if (num_datasets < 1) throw ConfigError("model needs at least one dataset");
    const std::size_t D = cfg_.embed_dim;

    std::vector<double> ctx(num_datasets * cfg_.ctx_dim);
    for (double& v : ctx) v = 0.02 * rng.normal();
    ctx_table_ = Tensor::from({num_datasets, cfg_.ctx_dim}, std::move(ctx), true);

    point1_ = Linear::create(cfg_.input_dim, D, rng);
    pn_point1_ = PromptNorm::create(D, cfg_.ctx_dim, cfg_.ppt_enabled);
    point2_ = Linear::create(D, D, rng);
    pn_point2_ = PromptNorm::create(D, cfg_.ctx_dim, cfg_.ppt_enabled);
    cell1_ = Linear::create(D, D, rng);
    pn_cell1_ = PromptNorm::create(D, cfg_.ctx_dim, cfg_.ppt_enabled);
    cell2_ = Linear::create(D, D, rng);
    pn_cell2_ = PromptNorm::create(D, cfg_.ctx_dim, cfg_.ppt_enabled);
    fuse_ = Linear::create(2 * D, D, rng);
    pn_fuse_ = PromptNorm::create(D, cfg_.ctx_dim, cfg_.ppt_enabled);

    if (cfg_.ambient_dim > 0) ambient_lift_ = Linear::create(1, cfg_.ambient_dim, rng);
    head_in_ = Linear::create(D + cfg_.ambient_dim, D, rng);
    head_expand_ = Linear::create(D, cfg_.expansion * D, rng);
    pn_head_ = PromptNorm::create(cfg_.expansion * D, cfg_.ctx_dim, cfg_.ppt_enabled);
    head_contract_ = Linear::create(cfg_.expansion * D, D, rng);
    head_out_ = Linear::create(D, cfg_.num_classes, rng);

    for (auto& [name, t] : named_parameters()) frozen_[name] = false;
}

Tensor Model::extractor_forward(const PointScan& scan, const RangeImage& image, NormMode mode) {
    const std::size_t n = scan.size();
    if (image.cell_id.size() != n)
        throw DimensionError("range image does not match scan point count");
    const int ds = scan.dataset_id;

    std::vector<double> in(n * cfg_.input_dim);
    for (std::size_t i = 0; i < n; ++i) {
        in[i * cfg_.input_dim + 0] = scan.x[i];
        in[i * cfg_.input_dim + 1] = scan.y[i];
        in[i * cfg_.input_dim + 2] = scan.z[i];
        in[i * cfg_.input_dim + 3] = image.range[i];
        in[i * cfg_.input_dim + 4] = scan.intensity[i];
    }
    Tensor h = Tensor::from({n, cfg_.input_dim}, std::move(in));
    h = relu(prompt_norm_forward(point1_.forward(h), ds, pn_point1_, ctx_table_, mode));
    Tensor point_feats =
        relu(prompt_norm_forward(point2_.forward(h), ds, pn_point2_, ctx_table_, mode));

    Tensor cells = scatter_max(point_feats, image.cell_id, image.num_cells());
    cells = window_mean(cells, image.height, image.width, cfg_.window);
    cells = relu(prompt_norm_forward(cell1_.forward(cells), ds, pn_cell1_, ctx_table_, mode));
    cells = window_mean(cells, image.height, image.width, cfg_.window);
    cells = relu(prompt_norm_forward(cell2_.forward(cells), ds, pn_cell2_, ctx_table_, mode));

    Tensor per_point = unproject(cells, image);
    Tensor fused = concat_cols(per_point, point_feats);
    return relu(prompt_norm_forward(fuse_.forward(fused), ds, pn_fuse_, ctx_table_, mode));
}

Tensor Model::ambient_inject(const Tensor& embed, const std::vector<double>& ambient) {
    if (cfg_.ambient_dim == 0) return embed;
    const std::size_t n = embed.dim(0);
    if (ambient.size() != n)
        throw DimensionError("ambient length " + std::to_string(ambient.size()) +
                             " does not match " + std::to_string(n) + " embeddings");
    Tensor amb = Tensor::from({n, 1}, ambient);
    return concat_cols(embed, ambient_lift_.forward(amb));
}

Tensor Model::head_proj(const Tensor& feat) { return head_in_.forward(feat); }

Tensor Model::head_block(const Tensor& hidden, NormMode mode, int dataset_id) {
    Tensor u = relu(head_expand_.forward(hidden));
    u = prompt_norm_forward(u, dataset_id, pn_head_, ctx_table_, mode);
    u = head_contract_.forward(u);
    return head_out_.forward(add(hidden, u));
}

Tensor Model::head_forward(const Tensor& feat, NormMode mode, int dataset_id) {
    return head_block(head_proj(feat), mode, dataset_id);
}

Prediction Model::predict(const PointScan& scan, const SensorSpec& spec) {
    const RangeImage image = project(scan, spec);
    Tensor embed = extractor_forward(scan, image, NormMode::kEval);
    std::vector<double> amb =
        scan.has_ambient() ? scan.ambient : std::vector<double>(scan.size(), 0.0);
    Tensor logits =
        head_forward(ambient_inject(embed, amb), NormMode::kEval, scan.dataset_id);

    const std::size_t n = scan.size(), k = cfg_.num_classes;
    Prediction pred;
    pred.labels.resize(n);
    pred.probs.resize(n * k);
    const auto& ld = logits.data();
    for (std::size_t i = 0; i < n; ++i) {
        double mx = ld[i * k];
        std::size_t arg = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (ld[i * k + c] > mx) {
                mx = ld[i * k + c];
                arg = c;
            }
        double denom = 0.0;
        for (std::size_t c = 0; c < k; ++c) denom += std::exp(ld[i * k + c] - mx);
        for (std::size_t c = 0; c < k; ++c)
            pred.probs[i * k + c] = std::exp(ld[i * k + c] - mx) / denom;
        pred.labels[i] = static_cast<std::uint8_t>(arg);
    }
    return pred;
}

std::vector<Model::PnRef> Model::prompt_norms() {
    return {{"extractor.pn_point1", &pn_point1_}, {"extractor.pn_point2", &pn_point2_},
            {"extractor.pn_cell1", &pn_cell1_},   {"extractor.pn_cell2", &pn_cell2_},
            {"extractor.pn_fuse", &pn_fuse_},     {"head.pn", &pn_head_}};
}

std::vector<std::pair<std::string, Linear*>> Model::linears() {
    std::vector<std::pair<std::string, Linear*>> out = {
        {"extractor.point1", &point1_},   {"extractor.point2", &point2_},
        {"extractor.cell1", &cell1_},     {"extractor.cell2", &cell2_},
        {"extractor.fuse", &fuse_},       {"head.in", &head_in_},
        {"head.expand", &head_expand_},   {"head.contract", &head_contract_},
        {"head.out", &head_out_}};
    if (cfg_.ambient_dim > 0) out.emplace_back("head.ambient_lift", &ambient_lift_);
    return out;
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("ctx_table", ctx_table_);
    for (auto& [name, lin] : linears()) {
        out.emplace_back(name + ".w", lin->w);
        out.emplace_back(name + ".b", lin->b);
    }
    for (auto& ref : prompt_norms()) {
        out.emplace_back(ref.name + ".gamma", ref.layer->base.gamma);
        out.emplace_back(ref.name + ".beta", ref.layer->base.beta);
        out.emplace_back(ref.name + ".scale_gen.w", ref.layer->scale_gen.w);
        out.emplace_back(ref.name + ".scale_gen.b", ref.layer->scale_gen.b);
        out.emplace_back(ref.name + ".shift_gen.w", ref.layer->shift_gen.w);
        out.emplace_back(ref.name + ".shift_gen.b", ref.layer->shift_gen.b);
    }
    std::sort(out.begin(), out.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
}

std::vector<std::pair<std::string, std::vector<double>*>> Model::named_buffers() {
    std::vector<std::pair<std::string, std::vector<double>*>> out;
    for (auto& ref : prompt_norms()) {
        out.emplace_back(ref.name + ".running_mean", &ref.layer->base.running_mean);
        out.emplace_back(ref.name + ".running_var", &ref.layer->base.running_var);
    }
    std::sort(out.begin(), out.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
}

void Model::set_frozen(const std::string& name, bool frozen) {
    for (auto& [pname, t] : named_parameters()) {
        if (pname != name) continue;
        frozen_[name] = frozen;
        t.set_requires_grad(!frozen);
        return;
    }
    throw ConfigError("unknown parameter " + name);
}

bool Model::is_frozen(const std::string& name) const {
    auto it = frozen_.find(name);
    if (it == frozen_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
}

std::vector<std::string> Model::frozen_names() const {
    std::vector<std::string> out;
    for (const auto& [name, fr] : frozen_)
        if (fr) out.push_back(name);
    return out;
}

void Model::set_extractor_stats_frozen(bool frozen) {
    for (auto& ref : prompt_norms())
        if (ref.name.rfind("extractor.", 0) == 0) ref.layer->base.update_running = !frozen;
}

// --- checkpoint (little-endian binary; layout documented in the README) ---

namespace {

constexpr char kMagic[8] = {'M', 'D', 'S', 'E', 'G', 'C', 'K', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 8);
}

std::uint64_t read_u64(std::istream& in) {
    char b[8];
    in.read(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
}

void write_f64_array(std::ostream& out, const std::vector<double>& v) {
    for (double d : v) {
        std::uint64_t u;
        std::memcpy(&u, &d, 8);
        write_u64(out, u);
    }
}

void read_f64_array(std::istream& in, std::vector<double>& v) {
    for (double& d : v) {
        const std::uint64_t u = read_u64(in);
        std::memcpy(&d, &u, 8);
    }
}

void write_str(std::ostream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream& in) {
    const std::uint64_t len = read_u64(in);
    std::string s(len, '\0');
    in.read(s.data(), static_cast<std::streamsize>(len));
    return s;
}

}  // namespace

void Model::save_checkpoint(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out.write(kMagic, 8);

    auto params = const_cast<Model*>(this)->named_parameters();
    write_u64(out, params.size());
    for (auto& [name, t] : params) {
        write_str(out, name);
        out.put(frozen_.at(name) ? 1 : 0);
        write_u64(out, t.rank());
        for (std::size_t d : t.shape()) write_u64(out, d);
        write_f64_array(out, t.data());
    }
    auto buffers = const_cast<Model*>(this)->named_buffers();
    write_u64(out, buffers.size());
    for (auto& [name, buf] : buffers) {
        write_str(out, name);
        write_u64(out, buf->size());
        write_f64_array(out, *buf);
    }
    if (!out) throw IoError("write failed on checkpoint " + path);
}

void Model::load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw FormatError(path + " is not a model checkpoint (bad magic)");

    auto params = named_parameters();
    const std::uint64_t n_params = read_u64(in);
    if (n_params != params.size())
        throw FormatError(path + ": checkpoint has " + std::to_string(n_params) +
                          " parameters, model expects " + std::to_string(params.size()));
    for (auto& [name, t] : params) {
        const std::string cname = read_str(in);
        if (cname != name)
            throw FormatError(path + ": parameter order mismatch, expected " + name + " got " +
                              cname);
        const bool frozen = in.get() != 0;
        const std::uint64_t rank = read_u64(in);
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = read_u64(in);
        if (shape != t.shape())
            throw FormatError(path + ": shape mismatch on " + name + ": checkpoint " +
                              shape_str(shape) + " vs model " + shape_str(t.shape()));
        read_f64_array(in, t.data());
        frozen_[name] = frozen;
        t.set_requires_grad(!frozen);
    }
    auto buffers = named_buffers();
    const std::uint64_t n_buffers = read_u64(in);
    if (n_buffers != buffers.size())
        throw FormatError(path + ": buffer count mismatch");
    for (auto& [name, buf] : buffers) {
        const std::string cname = read_str(in);
        if (cname != name)
            throw FormatError(path + ": buffer order mismatch, expected " + name);
        const std::uint64_t len = read_u64(in);
        if (len != buf->size()) throw FormatError(path + ": buffer size mismatch on " + name);
        read_f64_array(in, *buf);
    }
    if (!in) throw FormatError(path + ": truncated checkpoint");
}

void one_hot_targets(const std::vector<std::uint8_t>& labels, std::size_t num_classes,
                     std::vector<double>* targets, std::vector<bool>* ignore_mask) {
    const std::size_t n = labels.size();
    targets->assign(n * num_classes, 0.0);
    ignore_mask->assign(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] == kIgnoreLabel) {
            (*ignore_mask)[i] = true;
            // keep the row a valid distribution so loss preconditions hold
            (*targets)[i * num_classes] = 1.0;
        } else {
            (*targets)[i * num_classes + labels[i]] = 1.0;
        }
    }
}

}  // namespace mdseg
