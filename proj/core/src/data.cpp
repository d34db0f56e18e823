#include "coxvae/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "binio.hpp"

namespace coxvae {

void SyntheticConfig::validate() const {
    if (image_side < 8 || image_side > 64)
        throw ConfigError("image_side must lie in [8, 64], got " +
                          std::to_string(image_side));
    if (n_samples == 0) throw ConfigError("n_samples must be positive");
    if (blob_count_min < 0 || blob_count_max < blob_count_min)
        throw ConfigError("blob_count range is invalid");
    if (!(blob_radius_min > 0.0) || blob_radius_max < blob_radius_min)
        throw ConfigError("blob_radius range is invalid");
    if (!(hazard_slope >= 0.0)) throw ConfigError("hazard_slope must be nonnegative");
    if (!(baseline_rate > 0.0)) throw ConfigError("baseline_rate must be positive");
    if (!(censor_rate_target > 0.0 && censor_rate_target < 1.0))
        throw ConfigError("censor_rate_target must lie in (0,1), got " +
                          std::to_string(censor_rate_target));
}

void Dataset::validate() const {
    table.validate();
    if (!images.defined() || images.rank() != 2)
        throw ContractError("Dataset: images must be a [nxP] tensor");
    if (images.shape()[0] != table.size())
        throw ContractError("Dataset: image row count does not match the table");
    for (double v : images.values())
        if (!(v >= 0.0 && v <= 1.0))
            throw DomainError("Dataset: pixel values must lie in [0,1]");
    if (!true_loghazard.empty() && true_loghazard.size() != table.size())
        throw ContractError("Dataset: true_loghazard length mismatch");
}

namespace {

double positive_uniform(Rng& rng) {
    double u;
    do {
        u = rng.uniform01();
    } while (u <= 0.0);
    return u; // (0, 1)
}

// Organ ellipses span this fraction of the image side (semi-axis range).
// Wide enough to vary the tumor-to-organ area fraction strongly between
// samples, which is what separates the hazard levels.
constexpr double kOrganAxisMin = 0.22;
constexpr double kOrganAxisMax = 0.40;
constexpr double kOrganIntensity = 0.5;
constexpr double kTumorIntensity = 0.9;
constexpr double kNoiseAmplitude = 0.05;

struct Disk {
    double x, y, r;
};

} // namespace

SurvivalTable draw_survival_outcomes(std::span<const double> loghazard,
                                     double baseline_rate, double censor_target,
                                     Rng& rng) {
    if (!(baseline_rate > 0.0))
        throw ConfigError("draw_survival_outcomes: baseline_rate must be positive");
    if (!(censor_target > 0.0 && censor_target < 1.0))
        throw ConfigError("draw_survival_outcomes: censor target must lie in (0,1)");
    const std::size_t n = loghazard.size();
    if (n == 0) throw ContractError("draw_survival_outcomes: empty input");

    // Event times by inverse transform; censoring as a unit-rate exponential
    // draw scaled by 1/rate later, so one rate serves the whole cohort.
    std::vector<double> t_event(n), unit_censor(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double rate = baseline_rate * std::exp(loghazard[i]);
        t_event[i] = -std::log(positive_uniform(rng)) / rate;
        unit_censor[i] = -std::log(positive_uniform(rng));
    }

    // Subject i is censored at rate c iff unit_censor[i]/c < t_event[i],
    // i.e. c exceeds the subject's threshold. The realized fraction is a
    // monotone step function of c; bisect it in log space.
    std::vector<double> threshold(n);
    for (std::size_t i = 0; i < n; ++i) threshold[i] = unit_censor[i] / t_event[i];
    auto fraction_at = [&](double c) {
        std::size_t censored = 0;
        for (double th : threshold) censored += (c > th) ? 1 : 0;
        return static_cast<double>(censored) / static_cast<double>(n);
    };
    const auto [tmin, tmax] = std::minmax_element(threshold.begin(), threshold.end());
    double lo = *tmin * 0.5, hi = *tmax * 2.0;
    for (int it = 0; it < 20; ++it) {
        const double mid = std::sqrt(lo * hi);
        if (fraction_at(mid) < censor_target)
            lo = mid;
        else
            hi = mid;
    }
    const double rate_c = std::abs(fraction_at(lo) - censor_target) <
                                  std::abs(fraction_at(hi) - censor_target)
                              ? lo
                              : hi;
    const double realized = fraction_at(rate_c);
    if (std::abs(realized - censor_target) > 0.03)
        throw CalibrationError(
            "censor-rate calibration failed: target " + std::to_string(censor_target) +
            ", closest attainable " + std::to_string(realized));

    SurvivalTable table;
    table.time.resize(n);
    table.event.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double t_censor = unit_censor[i] / rate_c;
        table.time[i] = std::min(t_event[i], t_censor);
        table.event[i] = t_event[i] <= t_censor ? 1 : 0;
    }
    return table;
}

Dataset generate_blob_dataset(const SyntheticConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const std::size_t side = cfg.image_side;
    const std::size_t pixels = side * side;
    const double s = static_cast<double>(side);

    std::vector<double> images(cfg.n_samples * pixels);
    std::vector<double> loghazard(cfg.n_samples);

    for (std::size_t i = 0; i < cfg.n_samples; ++i) {
        const double cx = 0.5 * s + rng.uniform(-1.0, 1.0);
        const double cy = 0.5 * s + rng.uniform(-1.0, 1.0);
        const double a = rng.uniform(kOrganAxisMin, kOrganAxisMax) * s;
        const double b = rng.uniform(kOrganAxisMin, kOrganAxisMax) * s;
        const double theta = rng.uniform(0.0, std::numbers::pi);
        const double ct = std::cos(theta), st = std::sin(theta);

        const int count =
            cfg.blob_count_min +
            static_cast<int>(rng.below(static_cast<std::uint64_t>(
                cfg.blob_count_max - cfg.blob_count_min + 1)));
        std::vector<Disk> disks;
        disks.reserve(static_cast<std::size_t>(count));
        double blob_area = 0.0;
        for (int kblob = 0; kblob < count; ++kblob) {
            const double radius = rng.uniform(cfg.blob_radius_min, cfg.blob_radius_max);
            // place the center well inside the ellipse; keep centers apart so
            // blobs stay visually distinct
            double bx = cx, by = cy;
            for (int attempt = 0; attempt < 64; ++attempt) {
                const double u = rng.uniform(-1.0, 1.0);
                const double v = rng.uniform(-1.0, 1.0);
                if (u * u + v * v > 0.55) continue;
                const double ex = u * a, ey = v * b;
                const double candx = cx + ex * ct - ey * st;
                const double candy = cy + ex * st + ey * ct;
                bool apart = true;
                for (const Disk& d : disks) {
                    const double dx = candx - d.x, dy = candy - d.y;
                    if (std::hypot(dx, dy) < 0.8 * (radius + d.r)) {
                        apart = false;
                        break;
                    }
                }
                if (apart) {
                    bx = candx;
                    by = candy;
                    break;
                }
            }
            disks.push_back({bx, by, radius});
            blob_area += std::numbers::pi * radius * radius;
        }
        const double organ_area = std::numbers::pi * a * b;
        loghazard[i] = cfg.hazard_slope * blob_area / organ_area;

        double* img = images.data() + i * pixels;
        for (std::size_t py = 0; py < side; ++py) {
            for (std::size_t px = 0; px < side; ++px) {
                const double x = static_cast<double>(px) + 0.5;
                const double y = static_cast<double>(py) + 0.5;
                const double rx = (x - cx) * ct + (y - cy) * st;
                const double ry = -(x - cx) * st + (y - cy) * ct;
                const double e =
                    std::sqrt((rx / a) * (rx / a) + (ry / b) * (ry / b));
                const double organ_cov =
                    std::clamp((1.0 - e) * std::min(a, b) + 0.5, 0.0, 1.0);
                double tumor_cov = 0.0;
                for (const Disk& d : disks) {
                    const double dist = std::hypot(x - d.x, y - d.y);
                    tumor_cov = std::max(
                        tumor_cov, std::clamp(d.r - dist + 0.5, 0.0, 1.0));
                }
                double v = kOrganIntensity * organ_cov;
                v += (kTumorIntensity - v) * tumor_cov;
                v += rng.uniform(0.0, kNoiseAmplitude);
                // quantize to f32 so the on-disk format round-trips exactly
                img[py * side + px] =
                    static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0)));
            }
        }
    }

    Dataset ds;
    ds.images = Tensor({cfg.n_samples, pixels}, std::move(images));
    ds.table = draw_survival_outcomes(loghazard, cfg.baseline_rate,
                                      cfg.censor_rate_target, rng);
    ds.true_loghazard = std::move(loghazard);
    ds.validate();
    return ds;
}

std::vector<double> digit_loghazards(std::span<const int> labels, double spread) {
    std::vector<double> h(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] > 9)
            throw DomainError("digit_loghazards: labels must be digits 0-9");
        h[i] = spread * (static_cast<double>(labels[i]) - 4.5) / 4.5;
    }
    return h;
}

SurvivalTable assign_digit_hazards(std::span<const int> labels,
                                   double baseline_rate, double spread,
                                   double censor_target, std::uint64_t seed) {
    const auto h = digit_loghazards(labels, spread);
    Rng rng(seed);
    return draw_survival_outcomes(h, baseline_rate, censor_target, rng);
}

// ---- IDX ------------------------------------------------------------------

namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

std::uint32_t read_be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

} // namespace

IdxFile load_idx(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    std::vector<std::uint8_t> buf{std::istreambuf_iterator<char>(in),
                                  std::istreambuf_iterator<char>()};
    if (buf.size() < 4)
        throw FormatError(path.string() + ": truncated header at byte offset 0");
    IdxFile idx;
    idx.magic = read_be32(buf.data());
    std::size_t ndims;
    if (idx.magic == kIdxImages)
        ndims = 3;
    else if (idx.magic == kIdxLabels)
        ndims = 1;
    else
        throw FormatError(path.string() + ": bad IDX magic at byte offset 0");
    if (buf.size() < 4 + 4 * ndims)
        throw FormatError(path.string() + ": truncated dimension table at byte offset " +
                          std::to_string(buf.size()));
    std::size_t count = 1;
    for (std::size_t d = 0; d < ndims; ++d) {
        idx.dims.push_back(read_be32(buf.data() + 4 + 4 * d));
        count *= idx.dims.back();
    }
    const std::size_t header = 4 + 4 * ndims;
    if (buf.size() != header + count)
        throw FormatError(path.string() + ": payload length mismatch at byte offset " +
                          std::to_string(buf.size()));
    idx.payload.assign(buf.begin() + static_cast<std::ptrdiff_t>(header), buf.end());
    return idx;
}

void write_idx(const std::filesystem::path& path, const IdxFile& idx) {
    std::size_t count = 1;
    for (std::size_t d : idx.dims) count *= d;
    if (count != idx.payload.size())
        throw ContractError("write_idx: dims do not match payload size");
    std::vector<std::uint8_t> out;
    write_be32(out, idx.magic);
    for (std::size_t d : idx.dims)
        write_be32(out, static_cast<std::uint32_t>(d));
    out.insert(out.end(), idx.payload.begin(), idx.payload.end());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

Tensor idx_images_to_tensor(const IdxFile& idx) {
    if (idx.magic != kIdxImages || idx.dims.size() != 3)
        throw FormatError("idx_images_to_tensor: not an IDX image file");
    const std::size_t n = idx.dims[0], p = idx.dims[1] * idx.dims[2];
    std::vector<double> values(n * p);
    for (std::size_t i = 0; i < values.size(); ++i)
        values[i] = static_cast<double>(idx.payload[i]) / 255.0;
    return Tensor({n, p}, std::move(values));
}

std::vector<int> idx_labels(const IdxFile& idx) {
    if (idx.magic != kIdxLabels || idx.dims.size() != 1)
        throw FormatError("idx_labels: not an IDX label file");
    return {idx.payload.begin(), idx.payload.end()};
}

// ---- dataset directory ------------------------------------------------------

namespace {

constexpr char kImagesMagic[4] = {'S', 'V', 'I', 'M'};

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

} // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    ds.validate();
    std::filesystem::create_directories(dir);
    const std::size_t n = ds.size();
    const std::size_t pixels = ds.pixels();
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(
        static_cast<double>(pixels))));
    if (side * side != pixels)
        throw ContractError("write_dataset: images are not square");

    binio::Writer w(dir / "images.svi");
    w.bytes(kImagesMagic, 4);
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(n));
    w.u32(static_cast<std::uint32_t>(side));
    w.reset_crc(); // trailing CRC covers the payload only
    for (double v : ds.images.values()) w.f32(static_cast<float>(v));
    w.trailer_crc();
    w.close();

    std::ofstream csv(dir / "survival.csv", std::ios::binary);
    if (!csv) throw IoError("cannot open for writing: " + (dir / "survival.csv").string());
    const bool with_truth = !ds.true_loghazard.empty();
    csv << (with_truth ? "id,time_days,event,true_loghazard\n"
                       : "id,time_days,event\n");
    for (std::size_t i = 0; i < n; ++i) {
        csv << i << ',' << fmt_double(ds.table.time[i]) << ','
            << int(ds.table.event[i]);
        if (with_truth) csv << ',' << fmt_double(ds.true_loghazard[i]);
        csv << '\n';
    }
    csv.close();
    if (!csv) throw IoError("write failed: " + (dir / "survival.csv").string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
    binio::Reader r(dir / "images.svi");
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kImagesMagic, 4) != 0)
        throw FormatError(r.path_string() + ": bad magic at byte offset 0");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw FormatError(r.path_string() + ": unsupported version " +
                          std::to_string(version));
    const std::size_t n = r.u32();
    const std::size_t side = r.u32();
    const std::size_t count = n * side * side;
    const std::size_t payload_start = r.offset();
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i)
        values[i] = static_cast<double>(r.f32());
    const std::uint32_t want = r.crc_since(payload_start);
    const std::uint32_t got = r.u32();
    if (want != got)
        throw FormatError(r.path_string() + ": payload checksum mismatch");

    std::ifstream csv(dir / "survival.csv", std::ios::binary);
    if (!csv)
        throw IoError("cannot open for reading: " + (dir / "survival.csv").string());
    std::string line;
    if (!std::getline(csv, line))
        throw FormatError("survival.csv: missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    bool with_truth;
    if (line == "id,time_days,event,true_loghazard")
        with_truth = true;
    else if (line == "id,time_days,event")
        with_truth = false;
    else
        throw FormatError("survival.csv: unexpected header '" + line + "'");

    Dataset ds;
    ds.images = Tensor({n, side * side}, std::move(values));
    std::size_t row = 0;
    while (std::getline(csv, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        const std::size_t expect = with_truth ? 4 : 3;
        if (fields.size() != expect)
            throw FormatError("survival.csv row " + std::to_string(row) +
                              ": expected " + std::to_string(expect) + " fields");
        const double t = std::stod(fields[1]);
        if (!(t > 0.0) || !std::isfinite(t))
            throw FormatError("survival.csv row " + std::to_string(row) +
                              ": time must be positive, got " + fields[1]);
        if (fields[2] != "0" && fields[2] != "1")
            throw FormatError("survival.csv row " + std::to_string(row) +
                              ": event must be 0 or 1, got " + fields[2]);
        ds.table.time.push_back(t);
        ds.table.event.push_back(fields[2] == "1" ? 1 : 0);
        if (with_truth) ds.true_loghazard.push_back(std::stod(fields[3]));
        ++row;
    }
    if (row != n)
        throw FormatError("survival.csv: " + std::to_string(row) +
                          " rows do not match " + std::to_string(n) + " images");
    ds.validate();
    return ds;
}

namespace {

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& rows) {
    const std::size_t pixels = ds.pixels();
    std::vector<double> images(rows.size() * pixels);
    Dataset out;
    out.table.time.reserve(rows.size());
    out.table.event.reserve(rows.size());
    const auto src = ds.images.values();
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const std::size_t i = rows[k];
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * pixels), pixels,
                    images.begin() + static_cast<std::ptrdiff_t>(k * pixels));
        out.table.time.push_back(ds.table.time[i]);
        out.table.event.push_back(ds.table.event[i]);
        if (!ds.true_loghazard.empty())
            out.true_loghazard.push_back(ds.true_loghazard[i]);
    }
    out.images = Tensor({rows.size(), pixels}, std::move(images));
    return out;
}

} // namespace

std::pair<Dataset, Dataset> split(const Dataset& ds, double val_fraction,
                                  std::uint64_t seed) {
    ds.validate();
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw ConfigError("split: val_fraction must lie in (0,1), got " +
                          std::to_string(val_fraction));
    const std::size_t n = ds.size();
    const auto n_val = static_cast<std::size_t>(
        std::lround(static_cast<double>(n) * val_fraction));
    if (n_val == 0 || n_val == n)
        throw ConfigError("split: fraction " + std::to_string(val_fraction) +
                          " leaves one side of the split empty");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx);
    std::vector<std::size_t> val_rows(idx.begin(),
                                      idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train_rows(idx.begin() + static_cast<std::ptrdiff_t>(n_val),
                                        idx.end());
    std::sort(val_rows.begin(), val_rows.end());
    std::sort(train_rows.begin(), train_rows.end());
    return {subset(ds, train_rows), subset(ds, val_rows)};
}

} // namespace coxvae
