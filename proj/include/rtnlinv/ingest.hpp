#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "rtnlinv/seqsim.hpp"
#include "rtnlinv/types.hpp"

namespace rtnlinv {

enum class ImagingMode { single_slice, multi_slice, flow };

std::string mode_name(ImagingMode m);
ImagingMode mode_from_name(const std::string& s);  // DataError on unknown

// Self-describing dataset header shared by the k-space (.rtk) and image
// (.rti) containers: a little-endian uint32 byte length followed by that many
// bytes of UTF-8 key=value lines. Greppable, language-neutral, no container
// library needed. The exact byte layout is documented in docs/FORMATS.md and
// frozen by the golden files under tests/golden/.
struct DatasetHeader {
  int version = 1;
  int N = 0;                 // image side length, pixels
  int J_physical = 0;        // receive channels as stored
  int K = 0;                 // spokes per frame
  int U = 0;                 // interleaved turns
  int frames = 0;            // per slice
  int slices = 1;
  ImagingMode mode = ImagingMode::single_slice;
  int samples_per_spoke = 0;
};

// Throws DataError unless all counts are >= 1 and flow datasets have an even
// frame count (flow frames come in phase-encoded pairs).
void validate_header(const DatasetHeader& h);

// Bytes of one (frame, slice) payload block: J * K * samples complex float32.
size_t frame_bytes(const DatasetHeader& h);

// Streaming .rtk reader. Frames are stored frame -> slice -> channel ->
// spoke -> sample, interleaved complex float32, little endian. The reader
// fills the caller's frame in place and keeps no per-frame state of its own,
// so memory stays bounded by a single frame regardless of dataset length.
class RtkReader {
 public:
  explicit RtkReader(const std::string& path);  // parses the header

  const DatasetHeader& header() const { return hdr_; }

  // Next frame in acquisition order. Returns false at a clean end of stream.
  // Throws DataError on a truncated frame or a non-finite sample value.
  bool read_frame(KSpaceFrame& out);

  int frames_read() const { return blocks_read_; }

 private:
  std::ifstream in_;
  std::string path_;
  DatasetHeader hdr_;
  int blocks_read_ = 0;
};

class RtkWriter {
 public:
  RtkWriter(const std::string& path, const DatasetHeader& hdr);

  // Appends one (frame, slice) block. Shape must match the header and blocks
  // must arrive in stream order (frame-major, slice within).
  void write_frame(const KSpaceFrame& f);

  void close();  // flushes; throws DataError if fewer blocks than promised

 private:
  std::ofstream out_;
  std::string path_;
  DatasetHeader hdr_;
  int blocks_written_ = 0;
  bool closed_ = false;
};

// Whole-file conveniences over the streaming pair.
void write_dataset(const std::string& path, const DatasetHeader& hdr,
                   const std::vector<KSpaceFrame>& frames);
std::vector<KSpaceFrame> read_dataset(const std::string& path, DatasetHeader* hdr = nullptr);

enum class ImageKind { magnitude, phase_difference };

std::string kind_name(ImageKind k);
ImageKind kind_from_name(const std::string& s);

// One output image: real float32 pixels, N x N, cropped to the measured
// field of view. Flow outputs carry the pair index in frame_index.
struct ImageOut {
  int frame_index = 0;
  int slice_id = 0;
  int n = 0;
  ImageKind kind = ImageKind::magnitude;
  std::vector<float> pixels;  // row-major [n][n]

  float& at(int r, int c) { return pixels[static_cast<size_t>(r) * n + c]; }
  float at(int r, int c) const { return pixels[static_cast<size_t>(r) * n + c]; }
};

// .rti writer: header block, then raw float32 rows per image, appended in
// arrival order. Every image also appends one line to the sidecar index
// `<path>.idx` ("frame slice kind byte_offset"), so readers can seek without
// scanning. With strict_order (the default) frame indices must increase
// strictly per slice, matching the pipeline's delivery contract.
class RtiWriter {
 public:
  RtiWriter(const std::string& path, const DatasetHeader& hdr, bool strict_order = true);

  void write_image(const ImageOut& img);
  void close();

  int images_written() const { return count_; }

 private:
  std::ofstream out_;
  std::ofstream idx_;
  std::string path_;
  int n_ = 0;
  bool strict_ = true;
  bool closed_ = false;
  int count_ = 0;
  std::vector<int> last_frame_;  // per slice
};

struct RtiRecord {
  int frame_index = 0;
  int slice_id = 0;
  ImageKind kind = ImageKind::magnitude;
  uint64_t offset = 0;
};

class RtiReader {
 public:
  explicit RtiReader(const std::string& path);

  const DatasetHeader& header() const { return hdr_; }
  const std::vector<RtiRecord>& records() const { return records_; }
  ImageOut read_image(size_t index);

 private:
  std::ifstream in_;
  std::string path_;
  DatasetHeader hdr_;
  std::vector<RtiRecord> records_;
};

}  // namespace rtnlinv
