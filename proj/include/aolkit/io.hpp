#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aolkit/certification.hpp"
#include "aolkit/layers.hpp"
#include "aolkit/training.hpp"

#include <json.hpp>

namespace aol {

enum class DatasetKind { IdxMnist, Cifar10Binary, SyntheticBlobs, Csv };

struct DatasetSource {
    DatasetKind kind = DatasetKind::SyntheticBlobs;

    // idx_mnist
    std::string train_images, train_labels, test_images, test_labels;

    // cifar10_binary (label_bytes = 2 selects the CIFAR-100 record layout;
    // the fine label is used)
    std::vector<std::string> train_files;
    std::string test_file;
    int label_bytes = 1;
    int num_classes = 10;

    // synthetic_blobs
    int blobs_n = 400;
    int blobs_n_test = 100;
    int blobs_classes = 2;
    double blobs_noise = 0.15;
    std::uint64_t blobs_seed = 0;

    // csv (last column is the integer label)
    std::string train_csv, test_csv;

    // Cap on examples kept after loading (0 = keep all).
    int max_train = 0;
    int max_test = 0;
};

/// Images come back as [h,w,c] float64 in [0,1] (pixel/255); labels in [0, l).
Dataset load_dataset(const DatasetSource& src);

Shape dataset_input_shape(const Dataset& data);

// ---- checkpoints ----

struct CheckpointMeta {
    int format_version = 1;
    std::uint64_t seed = 0;
    int epoch = 0;
    double train_loss = 0.0, train_acc = 0.0, val_acc = 0.0;
    bool float32_storage = false;
};

/// JSON header (format version, model spec, seed, epoch, metric snapshot)
/// followed by per-parameter little-endian blobs in spec order, each
/// preceded by its shape. Float64 storage round-trips bitwise.
void save_checkpoint(const std::string& path, const Model& model, const CheckpointMeta& meta);

Model load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);

// ---- JSON schemas ----

nlohmann::json model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

nlohmann::json dataset_source_to_json(const DatasetSource& src);
DatasetSource dataset_source_from_json(const nlohmann::json& j);

nlohmann::json cert_report_to_json(const CertReport& report);

/// Run configuration file: {"model": ..., "train": ..., "dataset": ...}.
struct RunConfig {
    ModelSpec model;
    TrainConfig train;
    DatasetSource dataset;
};

RunConfig run_config_from_file(const std::string& path);
nlohmann::json run_config_to_json(const RunConfig& cfg);

}  // namespace aol
