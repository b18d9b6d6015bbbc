#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "rreg/metrics.hpp"
#include "rreg/volume.hpp"

namespace rreg::train {
struct CurveLog;
}

namespace rreg::io {

// ------------------------------------------------------------------- RVOL
// Native interchange format: magic "RVOL", version, dtype (1=f32, 2=u16),
// dims, channel count, label-count aux field, spacing, little-endian payload.

enum class RvolType : std::uint32_t { f32 = 1, u16 = 2 };

struct RvolFile {
    Shape3 shape;
    int channels = 1;
    std::uint32_t aux = 0;  // label_count for u16 files, 0 otherwise
    Spacing spacing{1.f, 1.f, 1.f};
    RvolType dtype = RvolType::f32;
    std::vector<float> f32;
    std::vector<std::uint16_t> u16;
};

void write_rvol(const std::string& path, const ScalarVolume& vol);
void write_rvol(const std::string& path, const LabelVolume& labels);
void write_rvol(const std::string& path, const VectorField& field);
RvolFile read_rvol(const std::string& path);

ScalarVolume rvol_as_scalar(const RvolFile& f);
LabelVolume rvol_as_labels(const RvolFile& f);
VectorField rvol_as_field(const RvolFile& f, FieldKind kind);

// ----------------------------------------------------------------- NIfTI-1
// Minimal single-file NIfTI-1 support: magic "n+1", datatypes int16/int32/
// float32/float64, both endiannesses, scl_slope/scl_inter applied when set.

struct NiftiVolume {
    ScalarVolume image;
    int src_datatype = 0;
    bool byte_swapped = false;
};

NiftiVolume read_nifti1(const std::string& path);
LabelVolume read_nifti1_labels(const std::string& path);
void write_nifti1(const std::string& path, const ScalarVolume& vol);

// --------------------------------------------------------------- landmarks
// Plain text: '#' comments, a "spacing sx sy sz" header line, then one
// "x y z" triple per line in voxel coordinates.

metrics::LandmarkSet read_landmarks(const std::string& path);
void write_landmarks(const std::string& path, const metrics::LandmarkSet& lms);

// ------------------------------------------------------------------- curves

void write_loss_csv(const std::string& path,
                    const std::vector<std::pair<std::int64_t, double>>& rows);
void write_val_csv(const std::string& path, const std::vector<std::pair<int, double>>& rows);
std::vector<std::pair<std::int64_t, double>> read_loss_csv(const std::string& path);
std::vector<std::pair<int, double>> read_val_csv(const std::string& path);

// Standalone SVG line chart (training loss plus smoothed validation Dice)
// with sibling CSVs next to it.
void write_curves_svg(const train::CurveLog& log, const std::string& path,
                      int smoothing_window = 5);

std::vector<double> moving_average(const std::vector<double>& xs, int window);

// ------------------------------------------------------------------- config
// Flat INI-style config: [section] headers, key = value lines, '#' comments.
// Keys are stored as "section.key". Unknown keys are rejected against the
// caller's registry.

struct RunConfig {
    std::map<std::string, std::string> values;

    bool has(const std::string& key) const { return values.count(key) != 0; }
    std::string get(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
};

RunConfig parse_config_file(const std::string& path, const std::set<std::string>& known_keys);
const std::set<std::string>& known_config_keys();

}  // namespace rreg::io
