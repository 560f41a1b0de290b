#include "rtnlinv/ingest.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

namespace rtnlinv {

static_assert(std::endian::native == std::endian::little,
              "the dataset containers assume a little-endian host");
static_assert(sizeof(float) == 4 && sizeof(cfloat) == 8);

namespace {

void write_u32(std::ostream& out, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.write(b, 4);
}

uint32_t read_u32(std::istream& in, const std::string& path) {
  char b[4];
  in.read(b, 4);
  if (in.gcount() != 4) throw DataError(path + ": header length prefix missing");
  uint32_t v;
  std::memcpy(&v, b, 4);
  return v;
}

std::string header_text(const DatasetHeader& h, const char* format) {
  std::ostringstream os;
  os << "format=" << format << "\n"
     << "version=" << h.version << "\n"
     << "n=" << h.N << "\n"
     << "channels=" << h.J_physical << "\n"
     << "spokes=" << h.K << "\n"
     << "turns=" << h.U << "\n"
     << "frames=" << h.frames << "\n"
     << "slices=" << h.slices << "\n"
     << "mode=" << mode_name(h.mode) << "\n"
     << "samples=" << h.samples_per_spoke << "\n";
  return os.str();
}

std::map<std::string, std::string> parse_kv(const std::string& text, const std::string& path) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw DataError(path + ": malformed header line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

int kv_int(const std::map<std::string, std::string>& kv, const std::string& key,
           const std::string& path) {
  auto it = kv.find(key);
  if (it == kv.end()) throw DataError(path + ": header key '" + key + "' missing");
  try {
    size_t pos = 0;
    const int v = std::stoi(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw DataError(path + ": header key '" + key + "' is not an integer");
  }
}

DatasetHeader parse_header(std::istream& in, const std::string& path, const char* format) {
  const uint32_t len = read_u32(in, path);
  if (len == 0 || len > (1u << 20)) throw DataError(path + ": implausible header length");
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (static_cast<uint32_t>(in.gcount()) != len) throw DataError(path + ": truncated header");
  const auto kv = parse_kv(text, path);
  auto fmt = kv.find("format");
  if (fmt == kv.end() || fmt->second != format) {
    throw DataError(path + ": not a ." + std::string(format) + " file");
  }
  DatasetHeader h;
  h.version = kv_int(kv, "version", path);
  h.N = kv_int(kv, "n", path);
  h.J_physical = kv_int(kv, "channels", path);
  h.K = kv_int(kv, "spokes", path);
  h.U = kv_int(kv, "turns", path);
  h.frames = kv_int(kv, "frames", path);
  h.slices = kv_int(kv, "slices", path);
  h.samples_per_spoke = kv_int(kv, "samples", path);
  auto m = kv.find("mode");
  if (m == kv.end()) throw DataError(path + ": header key 'mode' missing");
  h.mode = mode_from_name(m->second);
  validate_header(h);
  return h;
}

}  // namespace

std::string mode_name(ImagingMode m) {
  switch (m) {
    case ImagingMode::single_slice: return "single_slice";
    case ImagingMode::multi_slice: return "multi_slice";
    case ImagingMode::flow: return "flow";
  }
  return "single_slice";
}

ImagingMode mode_from_name(const std::string& s) {
  if (s == "single_slice") return ImagingMode::single_slice;
  if (s == "multi_slice") return ImagingMode::multi_slice;
  if (s == "flow") return ImagingMode::flow;
  throw DataError("unknown imaging mode '" + s + "'");
}

void validate_header(const DatasetHeader& h) {
  if (h.version < 1) throw DataError("dataset header: version must be >= 1");
  if (h.N < 1 || h.J_physical < 1 || h.K < 1 || h.U < 1 || h.frames < 1 || h.slices < 1 ||
      h.samples_per_spoke < 1) {
    throw DataError("dataset header: all counts must be >= 1");
  }
  if (h.mode == ImagingMode::flow && h.frames % 2 != 0) {
    throw DataError("dataset header: flow acquisitions need an even frame count");
  }
}

size_t frame_bytes(const DatasetHeader& h) {
  return static_cast<size_t>(h.J_physical) * h.K * h.samples_per_spoke * sizeof(cfloat);
}

RtkReader::RtkReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw DataError(path + ": cannot open");
  hdr_ = parse_header(in_, path_, "rtk");
}

bool RtkReader::read_frame(KSpaceFrame& out) {
  const int total = hdr_.frames * hdr_.slices;
  if (blocks_read_ >= total) return false;
  out.frame_index = blocks_read_ / hdr_.slices;
  out.slice_id = blocks_read_ % hdr_.slices;
  out.J = hdr_.J_physical;
  out.K = hdr_.K;
  out.S = hdr_.samples_per_spoke;
  out.samples.resize(static_cast<size_t>(out.J) * out.K * out.S);
  const std::streamsize want = static_cast<std::streamsize>(frame_bytes(hdr_));
  in_.read(reinterpret_cast<char*>(out.samples.data()), want);
  if (in_.gcount() != want) {
    throw DataError(path_ + ": truncated frame " + std::to_string(out.frame_index) +
                    " (got " + std::to_string(in_.gcount()) + " of " +
                    std::to_string(want) + " bytes)");
  }
  for (const cfloat& z : out.samples) {
    if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) {
      throw DataError(path_ + ": non-finite sample in frame " +
                      std::to_string(out.frame_index));
    }
  }
  TrajectorySpec spec;
  spec.K = hdr_.K;
  spec.U = hdr_.U;
  spec.samples_per_spoke = hdr_.samples_per_spoke;
  out.spoke_angles.resize(static_cast<size_t>(hdr_.K));
  for (int k = 0; k < hdr_.K; ++k) {
    out.spoke_angles[static_cast<size_t>(k)] = spoke_angle(spec, out.frame_index, k);
  }
  ++blocks_read_;
  return true;
}

RtkWriter::RtkWriter(const std::string& path, const DatasetHeader& hdr)
    : out_(path, std::ios::binary), path_(path), hdr_(hdr) {
  validate_header(hdr_);
  if (!out_) throw DataError(path + ": cannot open for writing");
  const std::string text = header_text(hdr_, "rtk");
  write_u32(out_, static_cast<uint32_t>(text.size()));
  out_.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out_) throw DataError(path + ": header write failed");
}

void RtkWriter::write_frame(const KSpaceFrame& f) {
  if (closed_) throw UsageError(path_ + ": write_frame after close");
  if (f.J != hdr_.J_physical || f.K != hdr_.K || f.S != hdr_.samples_per_spoke ||
      f.samples.size() != static_cast<size_t>(f.J) * f.K * f.S) {
    throw UsageError(path_ + ": frame shape does not match the header");
  }
  const int expect_frame = blocks_written_ / hdr_.slices;
  const int expect_slice = blocks_written_ % hdr_.slices;
  if (f.frame_index != expect_frame || f.slice_id != expect_slice) {
    throw UsageError(path_ + ": frames must be written in stream order (expected frame " +
                     std::to_string(expect_frame) + " slice " + std::to_string(expect_slice) +
                     ")");
  }
  out_.write(reinterpret_cast<const char*>(f.samples.data()),
             static_cast<std::streamsize>(frame_bytes(hdr_)));
  if (!out_) throw DataError(path_ + ": frame write failed at frame " +
                             std::to_string(f.frame_index));
  ++blocks_written_;
}

void RtkWriter::close() {
  if (closed_) return;
  closed_ = true;
  out_.flush();
  if (!out_) throw DataError(path_ + ": flush failed");
  if (blocks_written_ != hdr_.frames * hdr_.slices) {
    throw DataError(path_ + ": wrote " + std::to_string(blocks_written_) + " of " +
                    std::to_string(hdr_.frames * hdr_.slices) + " promised frames");
  }
}

void write_dataset(const std::string& path, const DatasetHeader& hdr,
                   const std::vector<KSpaceFrame>& frames) {
  RtkWriter w(path, hdr);
  for (const KSpaceFrame& f : frames) w.write_frame(f);
  w.close();
}

std::vector<KSpaceFrame> read_dataset(const std::string& path, DatasetHeader* hdr) {
  RtkReader r(path);
  if (hdr) *hdr = r.header();
  std::vector<KSpaceFrame> frames;
  KSpaceFrame f;
  while (r.read_frame(f)) frames.push_back(f);
  return frames;
}

std::string kind_name(ImageKind k) {
  return k == ImageKind::magnitude ? "magnitude" : "phase_difference";
}

ImageKind kind_from_name(const std::string& s) {
  if (s == "magnitude") return ImageKind::magnitude;
  if (s == "phase_difference") return ImageKind::phase_difference;
  throw DataError("unknown image kind '" + s + "'");
}

RtiWriter::RtiWriter(const std::string& path, const DatasetHeader& hdr, bool strict_order)
    : out_(path, std::ios::binary),
      idx_(path + ".idx"),
      path_(path),
      n_(hdr.N),
      strict_(strict_order),
      last_frame_(static_cast<size_t>(hdr.slices), -1) {
  validate_header(hdr);
  if (!out_ || !idx_) throw DataError(path + ": cannot open for writing");
  const std::string text = header_text(hdr, "rti");
  write_u32(out_, static_cast<uint32_t>(text.size()));
  out_.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out_) throw DataError(path + ": header write failed");
}

void RtiWriter::write_image(const ImageOut& img) {
  if (closed_) throw UsageError(path_ + ": write_image after close");
  if (img.n != n_ || img.pixels.size() != static_cast<size_t>(n_) * n_) {
    throw UsageError(path_ + ": image dimensions do not match the header (frame " +
                     std::to_string(img.frame_index) + ")");
  }
  if (img.slice_id < 0 || img.slice_id >= static_cast<int>(last_frame_.size())) {
    throw UsageError(path_ + ": slice id out of range (frame " +
                     std::to_string(img.frame_index) + ")");
  }
  int& last = last_frame_[static_cast<size_t>(img.slice_id)];
  if (strict_ && img.frame_index <= last) {
    throw UsageError(path_ + ": out-of-order write, frame " + std::to_string(img.frame_index) +
                     " after " + std::to_string(last) + " on slice " +
                     std::to_string(img.slice_id));
  }
  last = img.frame_index;
  const auto offset = static_cast<uint64_t>(out_.tellp());
  out_.write(reinterpret_cast<const char*>(img.pixels.data()),
             static_cast<std::streamsize>(img.pixels.size() * sizeof(float)));
  if (!out_) throw DataError(path_ + ": image write failed at frame " +
                             std::to_string(img.frame_index));
  idx_ << img.frame_index << ' ' << img.slice_id << ' ' << kind_name(img.kind) << ' '
       << offset << '\n';
  if (!idx_) throw DataError(path_ + ".idx: index write failed at frame " +
                             std::to_string(img.frame_index));
  ++count_;
}

void RtiWriter::close() {
  if (closed_) return;
  closed_ = true;
  out_.flush();
  idx_.flush();
  if (!out_ || !idx_) throw DataError(path_ + ": flush failed");
}

RtiReader::RtiReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw DataError(path + ": cannot open");
  hdr_ = parse_header(in_, path_, "rti");
  std::ifstream idx(path + ".idx");
  if (!idx) throw DataError(path + ".idx: cannot open");
  std::string line;
  while (std::getline(idx, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    RtiRecord rec;
    std::string kind;
    if (!(is >> rec.frame_index >> rec.slice_id >> kind >> rec.offset)) {
      throw DataError(path + ".idx: malformed line '" + line + "'");
    }
    rec.kind = kind_from_name(kind);
    records_.push_back(rec);
  }
}

ImageOut RtiReader::read_image(size_t index) {
  if (index >= records_.size()) throw UsageError(path_ + ": image index out of range");
  const RtiRecord& rec = records_[index];
  ImageOut img;
  img.frame_index = rec.frame_index;
  img.slice_id = rec.slice_id;
  img.kind = rec.kind;
  img.n = hdr_.N;
  img.pixels.resize(static_cast<size_t>(hdr_.N) * hdr_.N);
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(rec.offset));
  in_.read(reinterpret_cast<char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size() * sizeof(float)));
  if (in_.gcount() != static_cast<std::streamsize>(img.pixels.size() * sizeof(float))) {
    throw DataError(path_ + ": truncated image at offset " + std::to_string(rec.offset));
  }
  return img;
}

}  // namespace rtnlinv
