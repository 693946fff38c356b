#include "aolkit/io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "aolkit/rng.hpp"

using nlohmann::json;

namespace aol {

namespace {

std::uint32_t read_u32_be(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error(path + ": truncated file");
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | b[3];
}

std::ifstream open_binary(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    return f;
}

Tensor load_idx_images(const std::string& path, int max_n) {
    std::ifstream f = open_binary(path);
    const std::uint32_t magic = read_u32_be(f, path);
    if (magic != 0x00000803)
        throw std::runtime_error(path + ": bad IDX image magic number");
    int n = static_cast<int>(read_u32_be(f, path));
    const int h = static_cast<int>(read_u32_be(f, path));
    const int w = static_cast<int>(read_u32_be(f, path));
    if (max_n > 0) n = std::min(n, max_n);
    Tensor x({n, h, w, 1});
    std::vector<unsigned char> row(static_cast<std::size_t>(h) * w);
    for (int i = 0; i < n; ++i) {
        if (!f.read(reinterpret_cast<char*>(row.data()), row.size()))
            throw std::runtime_error(path + ": truncated IDX image data");
        for (std::size_t p = 0; p < row.size(); ++p)
            x[static_cast<std::int64_t>(i) * h * w + static_cast<std::int64_t>(p)] =
                row[p] / 255.0;
    }
    return x;
}

std::vector<int> load_idx_labels(const std::string& path, int max_n, int num_classes) {
    std::ifstream f = open_binary(path);
    const std::uint32_t magic = read_u32_be(f, path);
    if (magic != 0x00000801)
        throw std::runtime_error(path + ": bad IDX label magic number");
    int n = static_cast<int>(read_u32_be(f, path));
    if (max_n > 0) n = std::min(n, max_n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
        unsigned char b;
        if (!f.read(reinterpret_cast<char*>(&b), 1))
            throw std::runtime_error(path + ": truncated IDX label data");
        if (b >= num_classes)
            throw std::runtime_error(path + ": label " + std::to_string(int(b)) +
                                     " out of range");
        y[i] = b;
    }
    return y;
}

void load_cifar_file(const std::string& path, int label_bytes, int num_classes,
                     std::vector<double>& pixels, std::vector<int>& labels) {
    std::ifstream f = open_binary(path);
    f.seekg(0, std::ios::end);
    const std::int64_t size = f.tellg();
    f.seekg(0);
    const std::int64_t record = label_bytes + 3072;
    if (size % record != 0)
        throw std::runtime_error(path + ": size " + std::to_string(size) +
                                 " is not a multiple of the record length " +
                                 std::to_string(record));
    const int n = static_cast<int>(size / record);
    std::vector<unsigned char> buf(record);
    for (int i = 0; i < n; ++i) {
        if (!f.read(reinterpret_cast<char*>(buf.data()), record))
            throw std::runtime_error(path + ": truncated CIFAR record");
        const int label = buf[label_bytes - 1];  // fine label for 2-byte records
        if (label >= num_classes)
            throw std::runtime_error(path + ": label out of range");
        labels.push_back(label);
        // channel-planar RGB -> interleaved [h,w,c]
        for (int r = 0; r < 32; ++r)
            for (int c = 0; c < 32; ++c)
                for (int ch = 0; ch < 3; ++ch)
                    pixels.push_back(buf[label_bytes + ch * 1024 + r * 32 + c] / 255.0);
    }
}

Dataset load_cifar(const DatasetSource& src) {
    Dataset d;
    d.num_classes = src.num_classes;
    std::vector<double> px;
    std::vector<int> ly;
    for (const auto& file : src.train_files) load_cifar_file(file, src.label_bytes,
                                                             src.num_classes, px, ly);
    if (src.max_train > 0 && static_cast<int>(ly.size()) > src.max_train) {
        ly.resize(src.max_train);
        px.resize(static_cast<std::size_t>(src.max_train) * 3072);
    }
    d.train_x = Tensor({static_cast<int>(ly.size()), 32, 32, 3}, std::move(px));
    d.train_y = std::move(ly);
    std::vector<double> tpx;
    std::vector<int> tly;
    load_cifar_file(src.test_file, src.label_bytes, src.num_classes, tpx, tly);
    if (src.max_test > 0 && static_cast<int>(tly.size()) > src.max_test) {
        tly.resize(src.max_test);
        tpx.resize(static_cast<std::size_t>(src.max_test) * 3072);
    }
    d.test_x = Tensor({static_cast<int>(tly.size()), 32, 32, 3}, std::move(tpx));
    d.test_y = std::move(tly);
    return d;
}

void make_blobs(int n, int classes, double noise, Rng& rng, Tensor& x, std::vector<int>& y) {
    x = Tensor({n, 2});
    y.resize(n);
    const double pi = 3.14159265358979323846;
    for (int i = 0; i < n; ++i) {
        const int c = i % classes;
        const double angle = 2.0 * pi * c / classes;
        x[2 * i] = 2.0 * std::cos(angle) + noise * rng.gaussian();
        x[2 * i + 1] = 2.0 * std::sin(angle) + noise * rng.gaussian();
        y[i] = c;
    }
}

Dataset load_blobs(const DatasetSource& src) {
    Dataset d;
    d.num_classes = src.blobs_classes;
    Rng rng(src.blobs_seed);
    make_blobs(src.blobs_n, src.blobs_classes, src.blobs_noise, rng, d.train_x, d.train_y);
    make_blobs(src.blobs_n_test, src.blobs_classes, src.blobs_noise, rng, d.test_x, d.test_y);
    return d;
}

void load_csv_file(const std::string& path, std::vector<double>& values, std::vector<int>& labels,
                   int& dim) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            const std::size_t comma = line.find(',', pos);
            const std::string cell =
                line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            row.push_back(std::stod(cell));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (row.size() < 2) throw std::runtime_error(path + ": need features plus a label");
        if (dim == 0) dim = static_cast<int>(row.size()) - 1;
        if (static_cast<int>(row.size()) - 1 != dim)
            throw std::runtime_error(path + ": inconsistent column count");
        labels.push_back(static_cast<int>(std::lround(row.back())));
        values.insert(values.end(), row.begin(), row.end() - 1);
    }
}

Dataset load_csv(const DatasetSource& src) {
    Dataset d;
    int dim = 0;
    std::vector<double> tr, te;
    load_csv_file(src.train_csv, tr, d.train_y, dim);
    load_csv_file(src.test_csv, te, d.test_y, dim);
    d.train_x = Tensor({static_cast<int>(d.train_y.size()), dim}, std::move(tr));
    d.test_x = Tensor({static_cast<int>(d.test_y.size()), dim}, std::move(te));
    int maxl = 0;
    for (int v : d.train_y) maxl = std::max(maxl, v);
    for (int v : d.test_y) maxl = std::max(maxl, v);
    d.num_classes = src.num_classes > maxl ? src.num_classes : maxl + 1;
    return d;
}

}  // namespace

Dataset load_dataset(const DatasetSource& src) {
    Dataset d;
    switch (src.kind) {
        case DatasetKind::IdxMnist:
            d.train_x = load_idx_images(src.train_images, src.max_train);
            d.train_y = load_idx_labels(src.train_labels, src.max_train, src.num_classes);
            d.test_x = load_idx_images(src.test_images, src.max_test);
            d.test_y = load_idx_labels(src.test_labels, src.max_test, src.num_classes);
            d.num_classes = src.num_classes;
            break;
        case DatasetKind::Cifar10Binary:
            d = load_cifar(src);
            break;
        case DatasetKind::SyntheticBlobs:
            d = load_blobs(src);
            break;
        case DatasetKind::Csv:
            d = load_csv(src);
            break;
    }
    if (d.train_x.dim(0) != static_cast<int>(d.train_y.size()) ||
        d.test_x.dim(0) != static_cast<int>(d.test_y.size()))
        throw std::runtime_error("load_dataset: image and label counts disagree");
    auto truncate = [](Tensor& x, std::vector<int>& y, int cap) {
        if (cap <= 0 || x.dim(0) <= cap) return;
        std::vector<int> shape = x.shape();
        shape[0] = cap;
        Tensor t(shape);
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = x[i];
        x = t;
        y.resize(static_cast<std::size_t>(cap));
    };
    truncate(d.train_x, d.train_y, src.max_train);
    truncate(d.test_x, d.test_y, src.max_test);
    if (!d.train_x.all_finite() || !d.test_x.all_finite())
        throw std::runtime_error("load_dataset: non-finite values in loaded data");
    return d;
}

Shape dataset_input_shape(const Dataset& data) {
    Shape s(data.train_x.shape().begin() + 1, data.train_x.shape().end());
    return s;
}

// ---- checkpoints ----

namespace {

constexpr char kCkptMagic[8] = {'A', 'O', 'L', 'C', 'K', 'P', 'T', '\0'};

void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64_le(std::istream& is, const std::string& path) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8))
        throw std::runtime_error(path + ": truncated checkpoint");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_blob(std::ostream& os, const Tensor& t, bool f32) {
    write_u64_le(os, t.rank());
    for (int i = 0; i < t.rank(); ++i) write_u64_le(os, static_cast<std::uint64_t>(t.dim(i)));
    if (f32) {
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const float v = static_cast<float>(t[i]);
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            unsigned char b[4];
            for (int k = 0; k < 4; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
            os.write(reinterpret_cast<const char*>(b), 4);
        }
    } else {
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const double v = t[i];
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            write_u64_le(os, bits);
        }
    }
}

Tensor read_blob(std::istream& is, const std::string& path, bool f32) {
    const int rank = static_cast<int>(read_u64_le(is, path));
    std::vector<int> shape(rank);
    for (int i = 0; i < rank; ++i) shape[i] = static_cast<int>(read_u64_le(is, path));
    Tensor t(shape);
    if (f32) {
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            unsigned char b[4];
            if (!is.read(reinterpret_cast<char*>(b), 4))
                throw std::runtime_error(path + ": truncated checkpoint blob");
            std::uint32_t bits = 0;
            for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(b[k]) << (8 * k);
            float v;
            std::memcpy(&v, &bits, 4);
            t[i] = v;
        }
    } else {
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const std::uint64_t bits = read_u64_le(is, path);
            double v;
            std::memcpy(&v, &bits, 8);
            t[i] = v;
        }
    }
    return t;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const CheckpointMeta& meta) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    json header;
    header["format_version"] = meta.format_version;
    header["model_spec"] = model_spec_to_json(model.spec);
    header["seed"] = meta.seed;
    header["epoch"] = meta.epoch;
    header["metrics"] = {{"train_loss", meta.train_loss},
                         {"train_acc", meta.train_acc},
                         {"val_acc", meta.val_acc}};
    header["dtype"] = meta.float32_storage ? "f32" : "f64";
    const std::string hs = header.dump();
    f.write(kCkptMagic, 8);
    write_u64_le(f, hs.size());
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (std::size_t i = 0; i < model.layer_count(); ++i) {
        if (!model.spec.layers[i].has_params()) continue;
        write_blob(f, model.params[i].P, meta.float32_storage);
        write_blob(f, model.params[i].b, meta.float32_storage);
    }
}

Model load_checkpoint(const std::string& path, CheckpointMeta* meta) {
    std::ifstream f = open_binary(path);
    char magic[8];
    if (!f.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw std::runtime_error(path + ": bad checkpoint magic");
    const std::uint64_t hlen = read_u64_le(f, path);
    std::string hs(hlen, '\0');
    if (!f.read(hs.data(), static_cast<std::streamsize>(hlen)))
        throw std::runtime_error(path + ": truncated checkpoint header");
    const json header = json::parse(hs);
    const bool f32 = header.at("dtype").get<std::string>() == "f32";
    Model model;
    model.spec = model_spec_from_json(header.at("model_spec"));
    model.params.resize(model.layer_count());
    for (std::size_t i = 0; i < model.layer_count(); ++i) {
        if (!model.spec.layers[i].has_params()) continue;
        model.params[i].P = read_blob(f, path, f32);
        model.params[i].b = read_blob(f, path, f32);
    }
    if (meta) {
        meta->format_version = header.at("format_version").get<int>();
        meta->seed = header.at("seed").get<std::uint64_t>();
        meta->epoch = header.at("epoch").get<int>();
        meta->float32_storage = f32;
        const auto& m = header.at("metrics");
        meta->train_loss = m.at("train_loss").get<double>();
        meta->train_acc = m.at("train_acc").get<double>();
        meta->val_acc = m.at("val_acc").get<double>();
    }
    infer_shapes(model.spec);  // validate
    return model;
}

// ---- JSON schemas ----

json model_spec_to_json(const ModelSpec& spec) {
    json layers = json::array();
    for (const auto& l : spec.layers) {
        json jl;
        jl["type"] = layer_kind_to_string(l.kind);
        switch (l.kind) {
            case LayerKind::AolConv:
                jl["kernel"] = l.kernel;
                jl["stride"] = l.stride;
                jl["out_channels"] = l.out_channels;
                jl["padding"] = padding_to_string(l.padding);
                if (!l.rescaled) jl["rescaled"] = false;
                break;
            case LayerKind::AolFc:
                jl["out_dim"] = l.out_dim;
                if (!l.rescaled) jl["rescaled"] = false;
                break;
            case LayerKind::ConcatPool: jl["patch"] = l.patch; break;
            case LayerKind::FirstChannels: jl["keep"] = l.keep; break;
            default: break;
        }
        layers.push_back(jl);
    }
    return json{{"input_shape", spec.input_shape}, {"layers", layers}};
}

ModelSpec model_spec_from_json(const json& j) {
    ModelSpec spec;
    spec.input_shape = j.at("input_shape").get<std::vector<int>>();
    for (const auto& jl : j.at("layers")) {
        const std::string type = jl.at("type").get<std::string>();
        LayerSpec l;
        if (type == "aol_conv") {
            l = LayerSpec::aol_conv(jl.at("kernel").get<int>(), jl.at("stride").get<int>(),
                                    jl.at("out_channels").get<int>(),
                                    padding_from_string(jl.value("padding", "same_zero")));
            l.rescaled = jl.value("rescaled", true);
        } else if (type == "aol_fc") {
            l = LayerSpec::aol_fc(jl.at("out_dim").get<int>());
            l.rescaled = jl.value("rescaled", true);
        } else if (type == "maxmin") {
            l = LayerSpec::maxmin();
        } else if (type == "concat_pool") {
            l = LayerSpec::concat_pool(jl.at("patch").get<int>());
        } else if (type == "first_channels") {
            l = LayerSpec::first_channels(jl.at("keep").get<int>());
        } else if (type == "flatten") {
            l = LayerSpec::flatten();
        } else {
            throw std::invalid_argument("unknown layer type: " + type);
        }
        spec.layers.push_back(l);
    }
    infer_shapes(spec);  // validate the chain eagerly
    return spec;
}

json train_config_to_json(const TrainConfig& cfg) {
    return json{{"lr0", cfg.lr0},
                {"momentum", cfg.momentum},
                {"weight_decay", cfg.weight_decay},
                {"batch_size", cfg.batch_size},
                {"epochs", cfg.epochs},
                {"milestones", cfg.milestones},
                {"loss_offset_u", cfg.loss_offset_u},
                {"loss_temperature_t", cfg.loss_temperature_t},
                {"seed", cfg.seed},
                {"augment_flip", cfg.augment_flip},
                {"augment_shift", cfg.augment_shift},
                {"cert_eps", cfg.cert_eps}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig cfg;
    cfg.lr0 = j.value("lr0", cfg.lr0);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.milestones = j.value("milestones", cfg.milestones);
    cfg.loss_offset_u = j.value("loss_offset_u", cfg.loss_offset_u);
    cfg.loss_temperature_t = j.value("loss_temperature_t", cfg.loss_temperature_t);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.augment_flip = j.value("augment_flip", cfg.augment_flip);
    cfg.augment_shift = j.value("augment_shift", cfg.augment_shift);
    cfg.cert_eps = j.value("cert_eps", cfg.cert_eps);
    cfg.validate();
    return cfg;
}

json dataset_source_to_json(const DatasetSource& src) {
    json j;
    switch (src.kind) {
        case DatasetKind::IdxMnist:
            j["kind"] = "idx_mnist";
            j["train_images"] = src.train_images;
            j["train_labels"] = src.train_labels;
            j["test_images"] = src.test_images;
            j["test_labels"] = src.test_labels;
            j["num_classes"] = src.num_classes;
            break;
        case DatasetKind::Cifar10Binary:
            j["kind"] = "cifar10_binary";
            j["train_files"] = src.train_files;
            j["test_file"] = src.test_file;
            j["label_bytes"] = src.label_bytes;
            j["num_classes"] = src.num_classes;
            break;
        case DatasetKind::SyntheticBlobs:
            j["kind"] = "synthetic_blobs";
            j["n"] = src.blobs_n;
            j["n_test"] = src.blobs_n_test;
            j["classes"] = src.blobs_classes;
            j["noise"] = src.blobs_noise;
            j["seed"] = src.blobs_seed;
            break;
        case DatasetKind::Csv:
            j["kind"] = "csv";
            j["train_csv"] = src.train_csv;
            j["test_csv"] = src.test_csv;
            j["num_classes"] = src.num_classes;
            break;
    }
    if (src.max_train > 0) j["max_train"] = src.max_train;
    if (src.max_test > 0) j["max_test"] = src.max_test;
    return j;
}

DatasetSource dataset_source_from_json(const json& j) {
    DatasetSource src;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "idx_mnist") {
        src.kind = DatasetKind::IdxMnist;
        src.train_images = j.at("train_images").get<std::string>();
        src.train_labels = j.at("train_labels").get<std::string>();
        src.test_images = j.at("test_images").get<std::string>();
        src.test_labels = j.at("test_labels").get<std::string>();
        src.num_classes = j.value("num_classes", 10);
    } else if (kind == "cifar10_binary") {
        src.kind = DatasetKind::Cifar10Binary;
        src.train_files = j.at("train_files").get<std::vector<std::string>>();
        src.test_file = j.at("test_file").get<std::string>();
        src.label_bytes = j.value("label_bytes", 1);
        src.num_classes = j.value("num_classes", 10);
    } else if (kind == "synthetic_blobs") {
        src.kind = DatasetKind::SyntheticBlobs;
        src.blobs_n = j.value("n", src.blobs_n);
        src.blobs_n_test = j.value("n_test", src.blobs_n_test);
        src.blobs_classes = j.value("classes", src.blobs_classes);
        src.blobs_noise = j.value("noise", src.blobs_noise);
        src.blobs_seed = j.value("seed", src.blobs_seed);
    } else if (kind == "csv") {
        src.kind = DatasetKind::Csv;
        src.train_csv = j.at("train_csv").get<std::string>();
        src.test_csv = j.at("test_csv").get<std::string>();
        src.num_classes = j.value("num_classes", 0);
    } else {
        throw std::invalid_argument("unknown dataset kind: " + kind);
    }
    src.max_train = j.value("max_train", 0);
    src.max_test = j.value("max_test", 0);
    return src;
}

json cert_report_to_json(const CertReport& report) {
    json per_eps = json::array();
    for (std::size_t e = 0; e < report.eps_list.size(); ++e)
        per_eps.push_back({{"eps", report.eps_list[e]},
                           {"certified", report.certified_count[e]},
                           {"total", report.total},
                           {"cert_acc", report.cert_acc[e]}});
    return json{{"lipschitz_bound", report.lipschitz_bound},
                {"total", report.total},
                {"clean_acc", report.clean_acc},
                {"results", per_eps}};
}

RunConfig run_config_from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config " + path);
    const json j = json::parse(f);
    RunConfig cfg;
    cfg.model = model_spec_from_json(j.at("model"));
    cfg.train = j.contains("train") ? train_config_from_json(j.at("train")) : TrainConfig{};
    if (j.contains("dataset")) cfg.dataset = dataset_source_from_json(j.at("dataset"));
    return cfg;
}

json run_config_to_json(const RunConfig& cfg) {
    return json{{"model", model_spec_to_json(cfg.model)},
                {"train", train_config_to_json(cfg.train)},
                {"dataset", dataset_source_to_json(cfg.dataset)}};
}

}  // namespace aol
