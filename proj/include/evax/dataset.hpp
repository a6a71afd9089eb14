#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "evax/image.hpp"

namespace evax {

enum class Task { cls, seg, loc };
enum class Split { train, val, test };

const char *task_name(Task t);
const char *split_name(Split s);
Task parse_task(const std::string &s);

// Half-open pixel box [x0, x1) x [y0, y1).
struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    double area() const { return (x1 - x0) * (y1 - y0); }
    bool operator==(const Box &) const = default;
};

struct ManifestRow {
    std::filesystem::path path;  // resolved against the manifest directory
    Split split = Split::train;
    std::vector<int> labels;     // cls: K values in {0,1,-1}; loc: one value in {0,1}
    std::filesystem::path mask_path;
    std::optional<Box> box;      // loc positives
    std::int64_t line = 0;       // 1-based line in the source file
    bool operator==(const ManifestRow &) const = default;
};

struct DatasetManifest {
    Task task = Task::cls;
    std::vector<std::string> label_names;
    std::vector<ManifestRow> rows;
    std::filesystem::path source;

    std::vector<std::size_t> indices(Split s) const;
    std::size_t count(Split s) const { return indices(s).size(); }
    bool operator==(const DatasetManifest &) const = default;
};

class ManifestError : public DataError {
   public:
    enum class Kind { missing_file, malformed_row, arity, invalid_label, bad_box, bad_split, empty };
    ManifestError(Kind kind, std::int64_t line, const std::string &what) : DataError(what), kind_(kind), line_(line) {}
    Kind kind() const noexcept { return kind_; }
    std::int64_t line() const noexcept { return line_; }

   private:
    Kind kind_;
    std::int64_t line_;
};

DatasetManifest load_manifest(const std::filesystem::path &path);
void write_manifest(const DatasetManifest &m, const std::filesystem::path &path);

// Keeps ceil(fraction * N_train) train rows: the first entries of one seeded
// permutation, so smaller fractions select subsets of larger ones. Row order
// is preserved; val/test rows are untouched.
DatasetManifest subsample(const DatasetManifest &m, double fraction, std::uint64_t seed);

struct CorpusStats {
    double mean = 0;
    double std = 1;
};
inline constexpr double kStdFloor = 1e-6;

// Population mean/std over every pixel of the train split.
CorpusStats corpus_stats(const DatasetManifest &m);
CorpusStats corpus_stats(const std::vector<Image> &images);

struct SynthSpec {
    Task task = Task::cls;
    std::int64_t count = 8;
    std::int64_t image_size = 64;
    double train_fraction = 0.5;
    double val_fraction = 0.1;
    double positive_fraction = 0.5;  // loc: share of images with a lesion
    double noise = 0.06;
    double lesion_min = 0.12;  // lesion radius range as a fraction of image_size
    double lesion_max = 0.2;
};

// One lesion per image (cls: square or disc, labels `square,disc`; loc: a
// lesion on a positive image, none on negatives; seg: one or two lesions).
// Writes images/, masks/ (seg) and manifest.csv under out_dir.
std::filesystem::path synth_corpus(const SynthSpec &spec, std::uint64_t seed, const std::filesystem::path &out_dir);

enum class UncertainPolicy { to_one, to_zero, exclude };
UncertainPolicy parse_uncertain_policy(const std::string &s);

// Maps -1 per policy; `weights` gets 0 for excluded entries.
void map_uncertain(const std::vector<int> &raw, UncertainPolicy policy, std::vector<float> &targets,
                   std::vector<double> &weights);

// Decoded images resized once to a fixed cache resolution, shared by every
// epoch. Masks (seg) are resized with nearest-neighbour on the same grid.
class ImageCache {
   public:
    ImageCache(const DatasetManifest &m, std::int64_t cache_size);
    const Image &image(std::size_t row) const { return images_[row]; }
    const Image &mask(std::size_t row) const { return masks_[row]; }
    std::int64_t size() const { return size_; }
    // Scale factors from original pixel coordinates to cache coordinates.
    double scale_x(std::size_t row) const { return scale_x_[row]; }
    double scale_y(std::size_t row) const { return scale_y_[row]; }

   private:
    std::int64_t size_;
    std::vector<Image> images_;
    std::vector<Image> masks_;
    std::vector<double> scale_x_, scale_y_;
};

// Training view: crop, flip, normalize. Drawn from a stream derived from
// (seed, epoch, row) only, so output is independent of thread count and order.
Tensor train_view(const Image &cached, const AugmentConfig &cfg, std::uint64_t seed, std::int64_t epoch,
                  std::size_t row);
// Evaluation view: resize to crop_size, normalize.
Tensor eval_view(const Image &cached, const AugmentConfig &cfg);

// Row order for one epoch: a permutation of `rows` drawn from (seed, epoch).
std::vector<std::size_t> epoch_order(const std::vector<std::size_t> &rows, std::uint64_t seed, std::int64_t epoch);

}  // namespace evax
