#include "rreg/io.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "rreg/train.hpp"

namespace rreg::io {

namespace {

void atomic_write(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw std::runtime_error("cannot open for writing: " + path);
        os.write(bytes.data(), std::streamsize(bytes.size()));
        if (!os) throw std::runtime_error("write failed: " + path);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("rename failed: " + path);
}

template <class T>
void put(std::string& buf, const T& v) {
    const char* p = reinterpret_cast<const char*>(&v);
    buf.append(p, p + sizeof(T));
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

// ------------------------------------------------------------------- RVOL

namespace {

constexpr char kRvolMagic[4] = {'R', 'V', 'O', 'L'};
constexpr std::uint32_t kRvolVersion = 1;

std::string rvol_header(const Shape3& s, int channels, RvolType dtype, std::uint32_t aux,
                        const Spacing& spacing) {
    std::string buf;
    buf.append(kRvolMagic, 4);
    put(buf, kRvolVersion);
    put(buf, std::uint32_t(dtype));
    put(buf, std::uint32_t(s.nx));
    put(buf, std::uint32_t(s.ny));
    put(buf, std::uint32_t(s.nz));
    put(buf, std::uint32_t(channels));
    put(buf, aux);
    for (float sp : spacing) put(buf, sp);
    return buf;
}

}  // namespace

void write_rvol(const std::string& path, const ScalarVolume& vol) {
    std::string buf = rvol_header(vol.shape, 1, RvolType::f32, 0, vol.spacing);
    buf.append(reinterpret_cast<const char*>(vol.data.data()), vol.data.size() * sizeof(float));
    atomic_write(path, buf);
}

void write_rvol(const std::string& path, const LabelVolume& labels) {
    std::string buf = rvol_header(labels.shape, 1, RvolType::u16,
                                  std::uint32_t(labels.label_count), {1.f, 1.f, 1.f});
    buf.append(reinterpret_cast<const char*>(labels.data.data()),
               labels.data.size() * sizeof(std::uint16_t));
    atomic_write(path, buf);
}

void write_rvol(const std::string& path, const VectorField& field) {
    std::string buf =
        rvol_header(field.shape, 3, RvolType::f32, std::uint32_t(field.kind), {1.f, 1.f, 1.f});
    buf.append(reinterpret_cast<const char*>(field.data.data()),
               field.data.size() * sizeof(float));
    atomic_write(path, buf);
}

RvolFile read_rvol(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kRvolMagic, 4) != 0)
        throw std::runtime_error("not an RVOL file: " + path);
    auto read_u32 = [&]() {
        std::uint32_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    const std::uint32_t version = read_u32();
    if (version != kRvolVersion)
        throw std::runtime_error("unsupported RVOL version " + std::to_string(version));
    RvolFile f;
    f.dtype = RvolType(read_u32());
    f.shape.nx = int(read_u32());
    f.shape.ny = int(read_u32());
    f.shape.nz = int(read_u32());
    f.channels = int(read_u32());
    f.aux = read_u32();
    for (float& sp : f.spacing) is.read(reinterpret_cast<char*>(&sp), 4);

    const std::size_t count = f.shape.voxels() * std::size_t(f.channels);
    if (f.dtype == RvolType::f32) {
        f.f32.resize(count);
        is.read(reinterpret_cast<char*>(f.f32.data()), std::streamsize(count * sizeof(float)));
    } else if (f.dtype == RvolType::u16) {
        f.u16.resize(count);
        is.read(reinterpret_cast<char*>(f.u16.data()),
                std::streamsize(count * sizeof(std::uint16_t)));
    } else {
        throw std::runtime_error("unknown RVOL dtype");
    }
    if (!is) throw std::runtime_error("truncated RVOL payload: " + path);
    return f;
}

ScalarVolume rvol_as_scalar(const RvolFile& f) {
    require(f.dtype == RvolType::f32 && f.channels == 1, "RVOL: expected 1-channel f32 volume");
    ScalarVolume v(f.shape);
    v.spacing = f.spacing;
    v.data = f.f32;
    return v;
}

LabelVolume rvol_as_labels(const RvolFile& f) {
    require(f.dtype == RvolType::u16 && f.channels == 1, "RVOL: expected 1-channel u16 volume");
    LabelVolume l(f.shape, int(f.aux));
    l.data = f.u16;
    if (l.label_count == 0) {
        std::uint16_t max_label = 0;
        for (auto x : l.data) max_label = std::max(max_label, x);
        l.label_count = int(max_label) + 1;
    }
    return l;
}

VectorField rvol_as_field(const RvolFile& f, FieldKind kind) {
    require(f.dtype == RvolType::f32 && f.channels == 3, "RVOL: expected 3-channel f32 field");
    VectorField v(f.shape, kind);
    v.data = f.f32;
    return v;
}

// ----------------------------------------------------------------- NIfTI-1

namespace {

constexpr std::size_t kNiftiHeaderSize = 348;

template <class T>
T get_at(const std::vector<char>& buf, std::size_t offset) {
    T v;
    std::memcpy(&v, buf.data() + offset, sizeof(T));
    return v;
}

template <class T>
void set_at(std::vector<char>& buf, std::size_t offset, T v) {
    std::memcpy(buf.data() + offset, &v, sizeof(T));
}

template <class T>
T byteswap_val(T v) {
    char* p = reinterpret_cast<char*>(&v);
    std::reverse(p, p + sizeof(T));
    return v;
}

struct NiftiHeader {
    Shape3 dims;
    Spacing spacing;
    int datatype = 0;
    int bitpix = 0;
    double vox_offset = 0;
    double scl_slope = 0;
    double scl_inter = 0;
    bool swapped = false;
};

NiftiHeader parse_nifti_header(const std::vector<char>& hdr, const std::string& path) {
    std::int32_t sizeof_hdr = get_at<std::int32_t>(hdr, 0);
    bool swapped = false;
    if (sizeof_hdr != 348) {
        if (byteswap_val(sizeof_hdr) == 348)
            swapped = true;
        else
            throw std::runtime_error("not a NIfTI-1 file (sizeof_hdr): " + path);
    }
    const char* magic = hdr.data() + 344;
    if (std::memcmp(magic, "ni1", 3) == 0)
        throw std::runtime_error("detached NIfTI (.hdr/.img pairs) unsupported: " + path);
    if (std::memcmp(magic, "n+1", 3) != 0)
        throw std::runtime_error("not a NIfTI-1 file (bad magic): " + path);

    auto get_i16 = [&](std::size_t off) {
        std::int16_t v = get_at<std::int16_t>(hdr, off);
        return swapped ? byteswap_val(v) : v;
    };
    auto get_f32 = [&](std::size_t off) {
        float v = get_at<float>(hdr, off);
        return swapped ? byteswap_val(v) : v;
    };

    NiftiHeader h;
    h.swapped = swapped;
    const int ndim = get_i16(40);
    if (ndim < 3) throw std::runtime_error("NIfTI volume has fewer than 3 dimensions: " + path);
    h.dims = Shape3(get_i16(42), get_i16(44), get_i16(46));
    for (int d = ndim >= 4 ? 4 : 0; d; --d) {
        // trailing dims of size > 1 are unsupported (single 3D volume only)
        if (d >= 4 && get_i16(40 + 2 * std::size_t(d)) > 1)
            throw std::runtime_error("NIfTI with multiple volumes unsupported: " + path);
        if (d == 4) break;
    }
    h.datatype = get_i16(70);
    h.bitpix = get_i16(72);
    h.spacing = {get_f32(80), get_f32(84), get_f32(88)};
    h.vox_offset = double(get_f32(108));
    h.scl_slope = double(get_f32(112));
    h.scl_inter = double(get_f32(116));
    if (h.vox_offset < double(kNiftiHeaderSize)) h.vox_offset = double(kNiftiHeaderSize);
    return h;
}

std::vector<char> read_payload(std::ifstream& is, const NiftiHeader& h, const std::string& path) {
    const std::size_t elem = std::size_t(h.bitpix) / 8;
    const std::size_t count = h.dims.voxels();
    std::vector<char> payload(count * elem);
    is.seekg(std::streamoff(h.vox_offset), std::ios::beg);
    is.read(payload.data(), std::streamsize(payload.size()));
    if (std::size_t(is.gcount()) != payload.size())
        throw std::runtime_error("truncated NIfTI payload: " + path);
    return payload;
}

template <class Src>
void convert_payload(const std::vector<char>& payload, bool swapped, double slope, double inter,
                     std::vector<float>& out) {
    const Src* src = reinterpret_cast<const Src*>(payload.data());
    const std::size_t n = out.size();
    const bool apply = slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        Src v = src[i];
        if (swapped) v = byteswap_val(v);
        double x = double(v);
        if (apply) x = slope * x + inter;
        out[i] = float(x);
    }
}

}  // namespace

NiftiVolume read_nifti1(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    std::vector<char> hdr(kNiftiHeaderSize);
    is.read(hdr.data(), std::streamsize(hdr.size()));
    if (std::size_t(is.gcount()) != hdr.size())
        throw std::runtime_error("truncated NIfTI header: " + path);
    NiftiHeader h = parse_nifti_header(hdr, path);

    NiftiVolume out;
    out.src_datatype = h.datatype;
    out.byte_swapped = h.swapped;
    out.image = ScalarVolume(h.dims);
    out.image.spacing = h.spacing;

    switch (h.datatype) {
        case 4: {  // int16
            h.bitpix = 16;
            auto payload = read_payload(is, h, path);
            convert_payload<std::int16_t>(payload, h.swapped, h.scl_slope, h.scl_inter,
                                          out.image.data);
            break;
        }
        case 8: {  // int32
            h.bitpix = 32;
            auto payload = read_payload(is, h, path);
            convert_payload<std::int32_t>(payload, h.swapped, h.scl_slope, h.scl_inter,
                                          out.image.data);
            break;
        }
        case 16: {  // float32
            h.bitpix = 32;
            auto payload = read_payload(is, h, path);
            convert_payload<float>(payload, h.swapped, h.scl_slope, h.scl_inter, out.image.data);
            break;
        }
        case 64: {  // float64
            h.bitpix = 64;
            auto payload = read_payload(is, h, path);
            convert_payload<double>(payload, h.swapped, h.scl_slope, h.scl_inter, out.image.data);
            break;
        }
        default:
            throw std::runtime_error("unsupported NIfTI datatype " + std::to_string(h.datatype) +
                                     ": " + path);
    }
    return out;
}

LabelVolume read_nifti1_labels(const std::string& path) {
    NiftiVolume v = read_nifti1(path);
    if (v.src_datatype != 4 && v.src_datatype != 8)
        throw std::runtime_error("label volumes must use an integer NIfTI datatype: " + path);
    LabelVolume l(v.image.shape, 0);
    std::uint16_t max_label = 0;
    for (std::size_t i = 0; i < v.image.data.size(); ++i) {
        const float x = v.image.data[i];
        if (x < 0.f || x > 65535.f)
            throw std::runtime_error("label value out of range in " + path);
        l.data[i] = std::uint16_t(std::lround(x));
        max_label = std::max(max_label, l.data[i]);
    }
    l.label_count = int(max_label) + 1;
    return l;
}

void write_nifti1(const std::string& path, const ScalarVolume& vol) {
    std::vector<char> hdr(kNiftiHeaderSize + 4, 0);  // +4: empty extension flag
    set_at<std::int32_t>(hdr, 0, 348);
    set_at<std::int16_t>(hdr, 40, 3);
    set_at<std::int16_t>(hdr, 42, std::int16_t(vol.shape.nx));
    set_at<std::int16_t>(hdr, 44, std::int16_t(vol.shape.ny));
    set_at<std::int16_t>(hdr, 46, std::int16_t(vol.shape.nz));
    for (std::size_t d = 4; d <= 7; ++d) set_at<std::int16_t>(hdr, 40 + 2 * d, 1);
    set_at<std::int16_t>(hdr, 70, 16);  // float32
    set_at<std::int16_t>(hdr, 72, 32);
    set_at<float>(hdr, 76, 1.f);
    set_at<float>(hdr, 80, vol.spacing[0]);
    set_at<float>(hdr, 84, vol.spacing[1]);
    set_at<float>(hdr, 88, vol.spacing[2]);
    set_at<float>(hdr, 108, 352.f);  // vox_offset
    set_at<float>(hdr, 112, 1.f);    // scl_slope
    set_at<float>(hdr, 116, 0.f);    // scl_inter
    hdr[344] = 'n';
    hdr[345] = '+';
    hdr[346] = '1';
    hdr[347] = '\0';

    std::string buf(hdr.begin(), hdr.end());
    buf.append(reinterpret_cast<const char*>(vol.data.data()), vol.data.size() * sizeof(float));
    atomic_write(path, buf);
}

// --------------------------------------------------------------- landmarks

metrics::LandmarkSet read_landmarks(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    metrics::LandmarkSet lms;
    std::string line;
    bool have_spacing = false;
    while (std::getline(is, line)) {
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ss(line);
        std::string tok;
        ss >> tok;
        if (tok == "spacing") {
            ss >> lms.spacing[0] >> lms.spacing[1] >> lms.spacing[2];
            if (!ss) throw std::runtime_error("bad spacing line in " + path);
            have_spacing = true;
            continue;
        }
        std::array<double, 3> p{};
        std::istringstream ps(line);
        if (!(ps >> p[0] >> p[1] >> p[2]))
            throw std::runtime_error("bad landmark line in " + path + ": " + line);
        lms.points.push_back(p);
    }
    (void)have_spacing;  // spacing defaults to 1mm when the header is absent
    return lms;
}

void write_landmarks(const std::string& path, const metrics::LandmarkSet& lms) {
    std::ostringstream os;
    os << "# landmarks: voxel coordinates, one per line\n";
    os << "spacing " << format_double(lms.spacing[0]) << " " << format_double(lms.spacing[1])
       << " " << format_double(lms.spacing[2]) << "\n";
    for (const auto& p : lms.points)
        os << format_double(p[0]) << " " << format_double(p[1]) << " " << format_double(p[2])
           << "\n";
    atomic_write(path, os.str());
}

// ------------------------------------------------------------------- curves

void write_loss_csv(const std::string& path,
                    const std::vector<std::pair<std::int64_t, double>>& rows) {
    std::ostringstream os;
    os << "step,loss\n";
    for (const auto& [step, loss] : rows) os << step << "," << format_double(loss) << "\n";
    atomic_write(path, os.str());
}

void write_val_csv(const std::string& path, const std::vector<std::pair<int, double>>& rows) {
    std::ostringstream os;
    os << "epoch,val_dice\n";
    for (const auto& [epoch, dice] : rows) os << epoch << "," << format_double(dice) << "\n";
    atomic_write(path, os.str());
}

std::vector<std::pair<std::int64_t, double>> read_loss_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    std::string line;
    std::getline(is, line);
    if (line != "step,loss") throw std::runtime_error("bad loss CSV header in " + path);
    std::vector<std::pair<std::int64_t, double>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw std::runtime_error("bad CSV row: " + line);
        rows.emplace_back(std::stoll(line.substr(0, comma)), std::stod(line.substr(comma + 1)));
    }
    return rows;
}

std::vector<std::pair<int, double>> read_val_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    std::string line;
    std::getline(is, line);
    if (line != "epoch,val_dice") throw std::runtime_error("bad val CSV header in " + path);
    std::vector<std::pair<int, double>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw std::runtime_error("bad CSV row: " + line);
        rows.emplace_back(std::stoi(line.substr(0, comma)), std::stod(line.substr(comma + 1)));
    }
    return rows;
}

std::vector<double> moving_average(const std::vector<double>& xs, int window) {
    std::vector<double> out(xs.size(), 0.0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const std::size_t lo = i + 1 >= std::size_t(window) ? i + 1 - std::size_t(window) : 0;
        double acc = 0.0;
        for (std::size_t j = lo; j <= i; ++j) acc += xs[j];
        out[i] = acc / double(i - lo + 1);
    }
    return out;
}

namespace {

struct PolyScale {
    double xmin, xmax, ymin, ymax;
    double px0, px1, py0, py1;

    double sx(double x) const {
        return xmax > xmin ? px0 + (x - xmin) / (xmax - xmin) * (px1 - px0) : px0;
    }
    double sy(double y) const {
        return ymax > ymin ? py0 - (y - ymin) / (ymax - ymin) * (py0 - py1) : py0;
    }
};

std::string polyline(const std::vector<std::pair<double, double>>& pts, const PolyScale& sc,
                     const std::string& color) {
    std::ostringstream os;
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", sc.sx(x), sc.sy(y));
        os << buf;
    }
    os << "\"/>\n";
    return os.str();
}

}  // namespace

void write_curves_svg(const train::CurveLog& log, const std::string& path, int smoothing_window) {
    if (log.train_loss.empty()) throw std::invalid_argument("write_curves_svg: empty curve log");

    // sibling CSVs
    std::string stem = path;
    if (stem.size() > 4 && stem.substr(stem.size() - 4) == ".svg") stem.resize(stem.size() - 4);
    write_loss_csv(stem + "_loss.csv", log.train_loss);
    if (!log.val_dice.empty()) write_val_csv(stem + "_val_dice.csv", log.val_dice);

    const int W = 720, H = 300;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

    std::vector<std::pair<double, double>> loss_pts;
    double lmin = 1e300, lmax = -1e300;
    for (const auto& [step, loss] : log.train_loss) {
        loss_pts.emplace_back(double(step), loss);
        lmin = std::min(lmin, loss);
        lmax = std::max(lmax, loss);
    }
    PolyScale lsc{loss_pts.front().first, loss_pts.back().first, lmin, lmax, 45, 350, 270, 20};
    os << polyline(loss_pts, lsc, "#1f77b4");
    os << "<text x=\"45\" y=\"14\" font-size=\"12\">training loss (" << loss_pts.size()
       << " steps)</text>\n";

    if (!log.val_dice.empty()) {
        std::vector<double> raw;
        std::vector<std::pair<double, double>> vpts, spts;
        double vmin = 1e300, vmax = -1e300;
        for (const auto& [epoch, dice] : log.val_dice) raw.push_back(dice);
        std::vector<double> smooth = moving_average(raw, smoothing_window);
        for (std::size_t i = 0; i < raw.size(); ++i) {
            const double e = double(log.val_dice[i].first);
            vpts.emplace_back(e, raw[i]);
            spts.emplace_back(e, smooth[i]);
            vmin = std::min({vmin, raw[i], smooth[i]});
            vmax = std::max({vmax, raw[i], smooth[i]});
        }
        PolyScale vsc{vpts.front().first, std::max(vpts.back().first, vpts.front().first + 1e-9),
                      vmin, vmax, 410, 700, 270, 20};
        os << polyline(vpts, vsc, "#d0d0d0");
        os << polyline(spts, vsc, "#d62728");
        os << "<text x=\"410\" y=\"14\" font-size=\"12\">validation Dice (smoothing window "
           << smoothing_window << ")</text>\n";
    }
    os << "</svg>\n";
    atomic_write(path, os.str());
}

// ------------------------------------------------------------------- config

std::string RunConfig::get(const std::string& key, const std::string& fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second;
}

double RunConfig::get_double(const std::string& key, double fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : std::stod(it->second);
}

int RunConfig::get_int(const std::string& key, int fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : std::stoi(it->second);
}

std::uint64_t RunConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : std::stoull(it->second);
}

const std::set<std::string>& known_config_keys() {
    static const std::set<std::string> keys = {
        "synth.shape",          "synth.channels",      "synth.svf_amplitude",
        "synth.svf_frequency",  "synth.ss_steps",      "synth.frequency",
        "model.stages",         "model.base_channels", "model.decoder_width",
        "model.ss_steps",       "train.epochs",        "train.pairs_per_epoch",
        "train.data_fraction",  "train.seed",          "train.loss",
        "train.eta",            "train.lambda",        "train.lr_pretrain",
        "train.lr_finetune",    "train.eval_every",    "train.val_pairs",
        "train.ncc_window",     "train.augment_flip",  "downstream.seed",
        "downstream.n_train",   "downstream.n_val",    "downstream.n_test",
        "downstream.frequency", "downstream.noise_sigma",
    };
    return keys;
}

RunConfig parse_config_file(const std::string& path, const std::set<std::string>& known_keys) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    RunConfig cfg;
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            const auto b = s.find_last_not_of(" \t\r");
            return s.substr(a, b - a + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad section");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key = value");
        const std::string key =
            (section.empty() ? "" : section + ".") + trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!known_keys.count(key))
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": unknown key '" +
                                     key + "'");
        cfg.values[key] = value;
    }
    return cfg;
}

}  // namespace rreg::io
