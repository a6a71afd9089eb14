#include "evax/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "evax/parallel.hpp"

namespace evax {

namespace fs = std::filesystem;

namespace {

using MKind = ManifestError::Kind;

[[noreturn]] void fail(MKind kind, const fs::path &path, std::int64_t line, const std::string &msg) {
    std::ostringstream os;
    os << path.string();
    if (line > 0) os << ": row " << line;
    os << ": " << msg;
    throw ManifestError(kind, line, os.str());
}

std::vector<std::string> split_csv(const std::string &line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
    std::size_t b = 0;
    while (b < s.size() && (s[b] == ' ' || s[b] == '\t')) ++b;
    return s.substr(b);
}

std::string csv_field(const std::string &s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

Split parse_split(const std::string &s, const fs::path &path, std::int64_t line) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    fail(MKind::bad_split, path, line, "split '" + s + "' is not one of train/val/test");
}

int parse_label(const std::string &s, const fs::path &path, std::int64_t line, bool allow_uncertain) {
    if (s == "1" || s == "1.0") return 1;
    if (s == "0" || s == "0.0") return 0;
    if (allow_uncertain && (s == "-1" || s == "-1.0")) return -1;
    fail(MKind::invalid_label, path, line, "label '" + s + "' is not in " + (allow_uncertain ? "{0,1,-1}" : "{0,1}"));
}

double parse_coord(const std::string &s, const fs::path &path, std::int64_t line) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception &) {
        fail(MKind::malformed_row, path, line, "box coordinate '" + s + "' is not a number");
    }
}

fs::path resolve(const fs::path &base, const std::string &p) {
    fs::path q(p);
    return q.is_absolute() ? q : base / q;
}

std::string relative_or_absolute(const fs::path &p, const fs::path &base) {
    std::error_code ec;
    auto rel = fs::relative(p, base, ec);
    if (ec || rel.empty() || *rel.begin() == "..") return p.string();
    return rel.generic_string();
}

std::string double_str(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

// Disc and square rasterizers share one definition of "inside" so that masks
// and boxes agree exactly with the rendered pixels.
struct Lesion {
    bool disc = true;
    double cx = 0, cy = 0, r = 0;  // square half-side for squares
    bool covers(std::int64_t i, std::int64_t j) const {
        const double x = static_cast<double>(j) + 0.5, y = static_cast<double>(i) + 0.5;
        if (disc) return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
        return std::abs(x - cx) <= r && std::abs(y - cy) <= r;
    }
};

Lesion random_lesion(CounterRng &rng, const SynthSpec &spec, bool disc) {
    Lesion l;
    l.disc = disc;
    const double s = static_cast<double>(spec.image_size);
    const double radius = s * (spec.lesion_min + (spec.lesion_max - spec.lesion_min) * rng.uniform_f64());
    // Equal areas: a square of half-side r*sqrt(pi)/2 matches a disc of radius r.
    l.r = disc ? radius : radius * std::sqrt(M_PI) / 2.0;
    const double margin = radius + 1.0;
    l.cx = margin + (s - 2 * margin) * rng.uniform_f64();
    l.cy = margin + (s - 2 * margin) * rng.uniform_f64();
    return l;
}

// Quantized to bytes up front so the written PNG decodes to the same values.
float quantize(double v) { return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f; }

Image background(CounterRng &rng, std::int64_t size, double noise) {
    Image img(size, size);
    const double tilt = 0.1 * rng.uniform_f64();
    for (std::int64_t i = 0; i < size; ++i) {
        for (std::int64_t j = 0; j < size; ++j) {
            const double base = 0.25 + tilt * static_cast<double>(i) / static_cast<double>(size);
            img.at(i, j) = quantize(base + noise * rng.normal());
        }
    }
    return img;
}

void paint(Image &img, const Lesion &l, CounterRng &rng, double noise) {
    const double level = 0.75 + 0.15 * rng.uniform_f64();
    for (std::int64_t i = 0; i < img.height; ++i) {
        for (std::int64_t j = 0; j < img.width; ++j) {
            if (l.covers(i, j)) img.at(i, j) = quantize(level + noise * rng.normal());
        }
    }
}

}  // namespace

const char *task_name(Task t) {
    switch (t) {
        case Task::cls:
            return "cls";
        case Task::seg:
            return "seg";
        case Task::loc:
            return "loc";
    }
    return "?";
}

const char *split_name(Split s) {
    switch (s) {
        case Split::train:
            return "train";
        case Split::val:
            return "val";
        case Split::test:
            return "test";
    }
    return "?";
}

Task parse_task(const std::string &s) {
    if (s == "cls") return Task::cls;
    if (s == "seg") return Task::seg;
    if (s == "loc") return Task::loc;
    throw ConfigError("task", "task must be one of cls, seg, loc; got '" + s + "'");
}

std::vector<std::size_t> DatasetManifest::indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].split == s) out.push_back(i);
    return out;
}

DatasetManifest load_manifest(const fs::path &path) {
    std::ifstream in(path);
    if (!in) fail(MKind::missing_file, path, 0, "manifest not found or unreadable");
    const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
    DatasetManifest m;
    m.source = path;

    std::string line;
    if (!std::getline(in, line)) fail(MKind::empty, path, 1, "manifest is empty");
    auto header = split_csv(trim(line));
    for (auto &h : header) h = trim(h);
    if (header.size() < 3 || header[0] != "path" || header[1] != "split") {
        fail(MKind::malformed_row, path, 1, "header must start with path,split and name at least one more column");
    }
    const std::vector<std::string> seg_header = {"path", "split", "mask_path"};
    const std::vector<std::string> loc_header = {"path", "split", "label", "box_x0", "box_y0", "box_x1", "box_y1"};
    if (header == seg_header) {
        m.task = Task::seg;
    } else if (header == loc_header) {
        m.task = Task::loc;
        m.label_names = {"label"};
    } else {
        m.task = Task::cls;
        m.label_names.assign(header.begin() + 2, header.end());
    }

    std::int64_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty()) continue;
        auto f = split_csv(line);
        for (auto &x : f) x = trim(x);
        if (f.size() != header.size()) {
            std::ostringstream os;
            os << "has " << f.size() << " fields but the header declares " << header.size();
            if (m.task == Task::cls) os << " (" << f.size() - std::min<std::size_t>(f.size(), 2) << " labels, expected " << m.label_names.size() << ")";
            fail(MKind::arity, path, lineno, os.str());
        }
        if (f[0].empty()) fail(MKind::malformed_row, path, lineno, "empty image path");
        ManifestRow row;
        row.line = lineno;
        row.path = resolve(base, f[0]);
        row.split = parse_split(f[1], path, lineno);
        switch (m.task) {
            case Task::cls:
                for (std::size_t k = 2; k < f.size(); ++k) row.labels.push_back(parse_label(f[k], path, lineno, true));
                break;
            case Task::seg:
                if (f[2].empty()) fail(MKind::malformed_row, path, lineno, "empty mask path");
                row.mask_path = resolve(base, f[2]);
                break;
            case Task::loc: {
                row.labels = {parse_label(f[2], path, lineno, false)};
                const bool any = !f[3].empty() || !f[4].empty() || !f[5].empty() || !f[6].empty();
                if (any) {
                    Box b{parse_coord(f[3], path, lineno), parse_coord(f[4], path, lineno), parse_coord(f[5], path, lineno),
                          parse_coord(f[6], path, lineno)};
                    if (!(b.x0 < b.x1) || !(b.y0 < b.y1)) {
                        fail(MKind::bad_box, path, lineno, "box must satisfy x0 < x1 and y0 < y1");
                    }
                    std::pair<std::int64_t, std::int64_t> dims;
                    try {
                        dims = image_dimensions(row.path);
                    } catch (const ImageError &e) {
                        fail(MKind::missing_file, path, lineno, std::string("cannot read image for box check: ") + e.what());
                    }
                    if (b.x0 < 0 || b.y0 < 0 || b.x1 > static_cast<double>(dims.second) || b.y1 > static_cast<double>(dims.first)) {
                        fail(MKind::bad_box, path, lineno, "box lies outside the " + std::to_string(dims.first) + "x" +
                                                               std::to_string(dims.second) + " image");
                    }
                    row.box = b;
                } else if (row.labels[0] == 1) {
                    fail(MKind::bad_box, path, lineno, "positive localization row needs a box");
                }
                break;
            }
        }
        m.rows.push_back(std::move(row));
    }
    if (m.rows.empty()) fail(MKind::empty, path, 0, "manifest has no rows");
    return m;
}

void write_manifest(const DatasetManifest &m, const fs::path &path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError(path.string() + ": cannot write manifest");
    const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
    out << "path,split";
    switch (m.task) {
        case Task::cls:
            for (const auto &n : m.label_names) out << ',' << csv_field(n);
            break;
        case Task::seg:
            out << ",mask_path";
            break;
        case Task::loc:
            out << ",label,box_x0,box_y0,box_x1,box_y1";
            break;
    }
    out << '\n';
    for (const auto &r : m.rows) {
        out << csv_field(relative_or_absolute(r.path, base)) << ',' << split_name(r.split);
        if (m.task == Task::seg) {
            out << ',' << csv_field(relative_or_absolute(r.mask_path, base));
        } else {
            for (int l : r.labels) out << ',' << l;
        }
        if (m.task == Task::loc) {
            if (r.box) {
                out << ',' << double_str(r.box->x0) << ',' << double_str(r.box->y0) << ',' << double_str(r.box->x1) << ','
                    << double_str(r.box->y1);
            } else {
                out << ",,,,";
            }
        }
        out << '\n';
    }
    if (!out) throw DataError(path.string() + ": write failed");
}

DatasetManifest subsample(const DatasetManifest &m, double fraction, std::uint64_t seed) {
    if (!(fraction > 0 && fraction <= 1)) throw ConfigError("data_fraction", "data_fraction must be in (0, 1]");
    const auto train = m.indices(Split::train);
    const auto n = static_cast<std::int64_t>(train.size());
    // The small slack keeps products like 0.07*100 = 7.000000000000001 from rounding up.
    const auto keep = std::min<std::int64_t>(n, static_cast<std::int64_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));
    const auto perm = seeded_permutation(n, seed);
    std::vector<bool> kept(m.rows.size(), false);
    for (std::int64_t i = 0; i < keep; ++i) kept[train[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]] = true;
    DatasetManifest out = m;
    out.rows.clear();
    for (std::size_t i = 0; i < m.rows.size(); ++i) {
        if (m.rows[i].split != Split::train || kept[i]) out.rows.push_back(m.rows[i]);
    }
    return out;
}

CorpusStats corpus_stats(const std::vector<Image> &images) {
    if (images.empty()) throw DataError("corpus_stats: no training images");
    // Two passes in double: exact enough for 1e-6 agreement on large corpora.
    double total = 0;
    std::int64_t count = 0;
    for (const auto &img : images) {
        double s = 0;
        for (float v : img.pixels) s += v;
        total += s;
        count += static_cast<std::int64_t>(img.pixels.size());
    }
    const double mean = total / static_cast<double>(count);
    double ss = 0;
    for (const auto &img : images) {
        double s = 0;
        for (float v : img.pixels) s += (v - mean) * (v - mean);
        ss += s;
    }
    return {mean, std::max(kStdFloor, std::sqrt(ss / static_cast<double>(count)))};
}

CorpusStats corpus_stats(const DatasetManifest &m) {
    const auto train = m.indices(Split::train);
    if (train.empty()) throw DataError("corpus_stats: manifest has an empty train split");
    std::vector<Image> images(train.size());
    parallel_for(static_cast<std::int64_t>(train.size()),
                 [&](std::int64_t i) { images[static_cast<std::size_t>(i)] = decode_image(m.rows[train[static_cast<std::size_t>(i)]].path); });
    return corpus_stats(images);
}

fs::path synth_corpus(const SynthSpec &spec, std::uint64_t seed, const fs::path &out_dir) {
    if (spec.count < 1) throw ConfigError("count", "count must be >= 1");
    if (spec.image_size < kMinImageSide) throw ConfigError("image_size", "image_size must be >= 16");
    if (!(spec.lesion_min > 0 && spec.lesion_min <= spec.lesion_max && spec.lesion_max < 0.5)) {
        throw ConfigError("lesion_min", "lesion radius range must satisfy 0 < min <= max < 0.5");
    }
    if (spec.train_fraction < 0 || spec.val_fraction < 0 || spec.train_fraction + spec.val_fraction > 1) {
        throw ConfigError("split", "split fractions must be non-negative and sum to at most 1");
    }
    std::error_code ec;
    fs::create_directories(out_dir / "images", ec);
    if (!ec && spec.task == Task::seg) fs::create_directories(out_dir / "masks", ec);
    if (ec) throw DataError(out_dir.string() + ": cannot create output directory: " + ec.message());

    DatasetManifest m;
    m.task = spec.task;
    if (spec.task == Task::cls) m.label_names = {"square", "disc"};
    if (spec.task == Task::loc) m.label_names = {"label"};

    const auto n = spec.count;
    CounterRng layout(seed);
    const auto split_perm = permutation(n, layout);
    const auto kind_perm = permutation(n, layout);
    const auto n_train = static_cast<std::int64_t>(std::llround(spec.train_fraction * static_cast<double>(n)));
    const auto n_val = static_cast<std::int64_t>(std::llround(spec.val_fraction * static_cast<double>(n)));
    const auto n_pos = static_cast<std::int64_t>(std::llround(spec.positive_fraction * static_cast<double>(n)));
    std::vector<Split> split(static_cast<std::size_t>(n));
    for (std::int64_t p = 0; p < n; ++p) {
        const auto i = static_cast<std::size_t>(split_perm[static_cast<std::size_t>(p)]);
        split[i] = p < n_train ? Split::train : p < n_train + n_val ? Split::val : Split::test;
    }

    m.rows.resize(static_cast<std::size_t>(n));
    parallel_for(n, [&](std::int64_t i) {
        const auto ui = static_cast<std::size_t>(i);
        CounterRng rng = CounterRng(seed).fork(1000 + static_cast<std::uint64_t>(i));
        Image img = background(rng, spec.image_size, spec.noise);
        char name[64];
        std::snprintf(name, sizeof name, "img_%05lld.png", static_cast<long long>(i));
        ManifestRow &row = m.rows[ui];
        row.path = out_dir / "images" / name;
        row.split = split[ui];
        row.line = i + 2;
        switch (spec.task) {
            case Task::cls: {
                const bool disc = kind_perm[ui] % 2 == 1;
                paint(img, random_lesion(rng, spec, disc), rng, spec.noise);
                row.labels = {disc ? 0 : 1, disc ? 1 : 0};
                break;
            }
            case Task::seg: {
                Image mask(spec.image_size, spec.image_size, 0.0f);
                const int lesions = 1 + static_cast<int>(rng.below(2));
                for (int k = 0; k < lesions; ++k) {
                    const auto l = random_lesion(rng, spec, rng.below(2) == 0);
                    paint(img, l, rng, spec.noise);
                    for (std::int64_t y = 0; y < spec.image_size; ++y)
                        for (std::int64_t x = 0; x < spec.image_size; ++x)
                            if (l.covers(y, x)) mask.at(y, x) = 1.0f;
                }
                char mname[64];
                std::snprintf(mname, sizeof mname, "mask_%05lld.png", static_cast<long long>(i));
                row.mask_path = out_dir / "masks" / mname;
                write_png_gray(mask, row.mask_path);
                break;
            }
            case Task::loc: {
                const bool positive = kind_perm[ui] < n_pos;
                row.labels = {positive ? 1 : 0};
                if (positive) {
                    const auto l = random_lesion(rng, spec, rng.below(2) == 0);
                    paint(img, l, rng, spec.noise);
                    Box b{1e30, 1e30, -1e30, -1e30};
                    for (std::int64_t y = 0; y < spec.image_size; ++y) {
                        for (std::int64_t x = 0; x < spec.image_size; ++x) {
                            if (!l.covers(y, x)) continue;
                            b.x0 = std::min(b.x0, static_cast<double>(x));
                            b.y0 = std::min(b.y0, static_cast<double>(y));
                            b.x1 = std::max(b.x1, static_cast<double>(x + 1));
                            b.y1 = std::max(b.y1, static_cast<double>(y + 1));
                        }
                    }
                    row.box = b;
                }
                break;
            }
        }
        write_png_gray(img, row.path);
    });
    const auto manifest_path = out_dir / "manifest.csv";
    write_manifest(m, manifest_path);
    return manifest_path;
}

UncertainPolicy parse_uncertain_policy(const std::string &s) {
    if (s == "one" || s == "1") return UncertainPolicy::to_one;
    if (s == "zero" || s == "0") return UncertainPolicy::to_zero;
    if (s == "exclude") return UncertainPolicy::exclude;
    throw ConfigError("uncertain_policy", "uncertain_policy must be one, zero or exclude; got '" + s + "'");
}

void map_uncertain(const std::vector<int> &raw, UncertainPolicy policy, std::vector<float> &targets,
                   std::vector<double> &weights) {
    targets.assign(raw.size(), 0.0f);
    weights.assign(raw.size(), 1.0);
    for (std::size_t k = 0; k < raw.size(); ++k) {
        if (raw[k] == -1) {
            if (policy == UncertainPolicy::to_one) targets[k] = 1.0f;
            if (policy == UncertainPolicy::exclude) weights[k] = 0.0;
        } else {
            targets[k] = static_cast<float>(raw[k]);
        }
    }
}

ImageCache::ImageCache(const DatasetManifest &m, std::int64_t cache_size) : size_(cache_size) {
    if (cache_size < kMinImageSide) throw ConfigError("cache_size", "cache resolution must be >= 16");
    const auto n = m.rows.size();
    images_.resize(n);
    scale_x_.resize(n);
    scale_y_.resize(n);
    if (m.task == Task::seg) masks_.resize(n);
    parallel_for(static_cast<std::int64_t>(n), [&](std::int64_t i) {
        const auto ui = static_cast<std::size_t>(i);
        const Image raw = decode_image(m.rows[ui].path);
        scale_x_[ui] = static_cast<double>(cache_size) / static_cast<double>(raw.width);
        scale_y_[ui] = static_cast<double>(cache_size) / static_cast<double>(raw.height);
        images_[ui] = resize_bilinear(raw, cache_size, cache_size);
        if (m.task == Task::seg) {
            const Image mask = decode_image(m.rows[ui].mask_path);
            if (mask.height != raw.height || mask.width != raw.width) {
                throw DataError(m.rows[ui].mask_path.string() + ": mask is " + std::to_string(mask.height) + "x" +
                                std::to_string(mask.width) + " but image is " + std::to_string(raw.height) + "x" +
                                std::to_string(raw.width));
            }
            Image bin = resize_nearest(mask, cache_size, cache_size);
            for (auto &v : bin.pixels) v = v >= 0.5f ? 1.0f : 0.0f;
            masks_[ui] = std::move(bin);
        }
    });
}

Tensor train_view(const Image &cached, const AugmentConfig &cfg, std::uint64_t seed, std::int64_t epoch,
                  std::size_t row) {
    CounterRng rng = CounterRng(seed, CounterRng::Stream::augment).fork(static_cast<std::uint64_t>(epoch)).fork(row);
    Image img = random_resized_crop(cached, rng, cfg);
    img = hflip(img, rng, cfg.hflip_prob);
    return normalize(img, cfg.mean, cfg.std);
}

Tensor eval_view(const Image &cached, const AugmentConfig &cfg) {
    return normalize(resize_bilinear(cached, cfg.crop_size, cfg.crop_size), cfg.mean, cfg.std);
}

std::vector<std::size_t> epoch_order(const std::vector<std::size_t> &rows, std::uint64_t seed, std::int64_t epoch) {
    CounterRng rng = CounterRng(seed, CounterRng::Stream::augment).fork(0x0DE5ull << 32 | static_cast<std::uint64_t>(epoch));
    const auto perm = permutation(static_cast<std::int64_t>(rows.size()), rng);
    std::vector<std::size_t> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) out[i] = rows[static_cast<std::size_t>(perm[i])];
    return out;
}

}  // namespace evax
