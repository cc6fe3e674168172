#include "semline/io.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "semline/error.hpp"

namespace semline {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

[[noreturn]] void fail_at(const std::string& path, int line_no, const std::string& what,
                          bool parse_error) {
  std::ostringstream os;
  os << path << ":" << line_no << ": " << what;
  if (parse_error) throw IoError(os.str());
  throw ValidationError(os.str());
}

std::ofstream open_out(const std::string& path, bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  return out;
}

std::ifstream open_in(const std::string& path, bool binary = false) {
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return in;
}

void check_id(const std::string& id) {
  if (id.empty() || id.find_first_of(" \t\r\n") != std::string::npos) {
    throw ValidationError("image id must be nonempty without whitespace, got '" + id + "'");
  }
}

/// Re-projects an endpoint onto the boundary (tolerance 0.5 px) or reports it.
Vec2 snap_endpoint(Vec2 p, const ImageSize& size, const std::string& path, int line_no) {
  const Vec2 q = nearest_boundary_point(p, size);
  const double d = std::hypot(p.x - q.x, p.y - q.y);
  if (d > 0.5 + 1e-9) {
    std::ostringstream os;
    os << "endpoint (" << p.x << ", " << p.y << ") lies " << d
       << " px off the image boundary (tolerance 0.5)";
    fail_at(path, line_no, os.str(), false);
  }
  return q;
}

Line snap_line(double xs, double ys, double xe, double ye, const ImageSize& size,
               const std::string& path, int line_no) {
  const Vec2 a = snap_endpoint({xs, ys}, size, path, line_no);
  const Vec2 b = snap_endpoint({xe, ye}, size, path, line_no);
  const Line line{a.x, a.y, b.x, b.y};
  if (const auto msg = validate_line(line, size)) {
    fail_at(path, line_no, *msg, false);
  }
  return line;
}

template <class T>
T parse_token(std::istringstream& in, const std::string& path, int line_no,
              const char* what) {
  T value{};
  if (!(in >> value)) {
    fail_at(path, line_no, std::string("expected ") + what, true);
  }
  return value;
}

int parse_flag(std::istringstream& in, const std::string& path, int line_no,
               const char* what) {
  const int v = parse_token<int>(in, path, line_no, what);
  if (v != 0 && v != 1) {
    fail_at(path, line_no, std::string(what) + " must be 0 or 1", true);
  }
  return v;
}

void expect_end(std::istringstream& in, const std::string& path, int line_no) {
  std::string extra;
  if (in >> extra) {
    fail_at(path, line_no, "unexpected trailing token '" + extra + "'", true);
  }
}

ImageSize parse_header(std::istringstream& in, const std::string& path, int line_no,
                       std::string& id, int& k) {
  id = parse_token<std::string>(in, path, line_no, "image id");
  const int w = parse_token<int>(in, path, line_no, "image width");
  const int h = parse_token<int>(in, path, line_no, "image height");
  if (w < 2 || h < 2) fail_at(path, line_no, "image size must be at least 2x2", false);
  k = parse_token<int>(in, path, line_no, "line count");
  if (k < 0) fail_at(path, line_no, "line count must be nonnegative", true);
  return ImageSize{w, h};
}

void check_primary_count(int primaries, int k, const std::string& path, int line_no) {
  if (k > 0 && primaries != 1) {
    std::ostringstream os;
    os << "expected exactly one primary flag, found " << primaries;
    fail_at(path, line_no, os.str(), false);
  }
}

// ---- checkpoint binary helpers -------------------------------------------

constexpr char kMagic[4] = {'S', 'L', 'N', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw IoError(path + ": truncated checkpoint");
  }
  return v;
}
std::uint64_t get_u64(std::istream& in, const std::string& path) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw IoError(path + ": truncated checkpoint");
  }
  return v;
}

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  const std::vector<double>* data;
};

void collect_conv(std::vector<NamedTensor>& out, const std::string& name,
                  const ConvParams& c) {
  out.push_back({name + ".w",
                 {static_cast<std::uint64_t>(c.cout), static_cast<std::uint64_t>(c.cin),
                  static_cast<std::uint64_t>(c.kh), static_cast<std::uint64_t>(c.kw)},
                 &c.w});
  out.push_back({name + ".b", {static_cast<std::uint64_t>(c.cout)}, &c.b});
}

void collect_dense(std::vector<NamedTensor>& out, const std::string& name,
                   const DenseParams& d) {
  out.push_back({name + ".w",
                 {static_cast<std::uint64_t>(d.out), static_cast<std::uint64_t>(d.in)},
                 &d.w});
  out.push_back({name + ".b", {static_cast<std::uint64_t>(d.out)}, &d.b});
}

void collect_attention(std::vector<NamedTensor>& out, const std::string& name,
                       const AttentionParams& a) {
  collect_conv(out, name + ".f0", a.f0);
  collect_conv(out, name + ".f1", a.f1);
  collect_conv(out, name + ".f2", a.f2);
}

std::vector<NamedTensor> collect_tensors(const Checkpoint& ckpt) {
  std::vector<NamedTensor> out;
  const DetectorParams& d = ckpt.detector;
  for (int i = 0; i < 4; ++i) {
    collect_conv(out, "backbone" + std::to_string(i + 1), d.backbone[static_cast<std::size_t>(i)]);
  }
  if (d.has_attention()) {
    collect_attention(out, "att3", d.att3);
    collect_attention(out, "att4", d.att4);
  }
  collect_dense(out, "fc1", d.fc1);
  collect_dense(out, "cls", d.cls);
  collect_dense(out, "reg", d.reg);
  collect_dense(out, "rank.fc_in", ckpt.rank.fc_in);
  collect_dense(out, "rank.fc_out", ckpt.rank.fc_out);
  collect_dense(out, "match.fc_in", ckpt.match.fc_in);
  collect_dense(out, "match.fc_out", ckpt.match.fc_out);
  return out;
}

/// Mutable twin of collect_tensors: destinations for loading.
struct TensorSlot {
  std::vector<std::uint64_t> dims;
  std::vector<double>* data;
};

std::map<std::string, TensorSlot> collect_slots(Checkpoint& ckpt) {
  // Build the same list against the mutable checkpoint, keyed by name.
  std::map<std::string, TensorSlot> slots;
  const Checkpoint& view = ckpt;
  auto tensors = collect_tensors(view);
  for (const NamedTensor& t : tensors) {
    slots[t.name] = {t.dims, const_cast<std::vector<double>*>(t.data)};
  }
  return slots;
}

}  // namespace

// ---- annotations -----------------------------------------------------------

void save_annotations(const std::string& path, const std::vector<AnnotationRecord>& records) {
  auto out = open_out(path);
  for (const AnnotationRecord& rec : records) {
    check_id(rec.id);
    if (rec.lines.empty()) throw ValidationError("annotation record '" + rec.id + "' has no lines");
    out << rec.id << " " << rec.size.width << " " << rec.size.height << " "
        << rec.lines.size();
    for (const GtLine& g : rec.lines) {
      out << "  " << fmt(g.line.x_s) << " " << fmt(g.line.y_s) << " " << fmt(g.line.x_e)
          << " " << fmt(g.line.y_e) << " " << (g.primary ? 1 : 0);
    }
    out << "\n";
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

std::vector<AnnotationRecord> load_annotations(const std::string& path) {
  auto in = open_in(path);
  std::vector<AnnotationRecord> records;
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(raw);
    AnnotationRecord rec;
    int k = 0;
    rec.size = parse_header(ls, path, line_no, rec.id, k);
    if (k == 0) fail_at(path, line_no, "annotation record must have at least one line", false);
    int primaries = 0;
    for (int i = 0; i < k; ++i) {
      const double xs = parse_token<double>(ls, path, line_no, "x_s");
      const double ys = parse_token<double>(ls, path, line_no, "y_s");
      const double xe = parse_token<double>(ls, path, line_no, "x_e");
      const double ye = parse_token<double>(ls, path, line_no, "y_e");
      const int p = parse_flag(ls, path, line_no, "primary flag");
      primaries += p;
      rec.lines.push_back({snap_line(xs, ys, xe, ye, rec.size, path, line_no), p == 1});
    }
    expect_end(ls, path, line_no);
    check_primary_count(primaries, k, path, line_no);
    records.push_back(std::move(rec));
  }
  return records;
}

// ---- detections ------------------------------------------------------------

void save_detections(const std::string& path, const std::vector<DetectionRecord>& records) {
  auto out = open_out(path);
  for (const DetectionRecord& rec : records) {
    check_id(rec.id);
    out << rec.id << " " << rec.size.width << " " << rec.size.height << " "
        << rec.detections.size();
    for (const Detection& d : rec.detections) {
      out << "  " << fmt(d.line.x_s) << " " << fmt(d.line.y_s) << " " << fmt(d.line.x_e)
          << " " << fmt(d.line.y_e) << " " << fmt(d.score) << " " << (d.primary ? 1 : 0);
    }
    out << "\n";
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

std::vector<DetectionRecord> load_detections(const std::string& path) {
  auto in = open_in(path);
  std::vector<DetectionRecord> records;
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(raw);
    DetectionRecord rec;
    int k = 0;
    rec.size = parse_header(ls, path, line_no, rec.id, k);
    int primaries = 0;
    for (int i = 0; i < k; ++i) {
      const double xs = parse_token<double>(ls, path, line_no, "x_s");
      const double ys = parse_token<double>(ls, path, line_no, "y_s");
      const double xe = parse_token<double>(ls, path, line_no, "x_e");
      const double ye = parse_token<double>(ls, path, line_no, "y_e");
      const double score = parse_token<double>(ls, path, line_no, "score");
      if (!(score >= 0.0 && score <= 1.0)) {
        fail_at(path, line_no, "score must lie in [0, 1]", false);
      }
      const int p = parse_flag(ls, path, line_no, "primary flag");
      primaries += p;
      rec.detections.push_back(
          {snap_line(xs, ys, xe, ye, rec.size, path, line_no), score, p == 1});
    }
    expect_end(ls, path, line_no);
    check_primary_count(primaries, k, path, line_no);
    records.push_back(std::move(rec));
  }
  return records;
}

// ---- PFM images ------------------------------------------------------------

void write_pfm(const std::string& path, const FeatureGrid& image) {
  if (image.c != 1 && image.c != 3) {
    throw ValidationError("PFM images must have 1 or 3 channels");
  }
  auto out = open_out(path, true);
  out << (image.c == 3 ? "PF" : "Pf") << "\n"
      << image.w << " " << image.h << "\n"
      << "-1.0\n";
  std::vector<float> row(static_cast<std::size_t>(image.w) * image.c);
  for (int y = image.h - 1; y >= 0; --y) {  // PFM rows run bottom-up
    std::size_t k = 0;
    for (int x = 0; x < image.w; ++x) {
      for (int ch = 0; ch < image.c; ++ch) {
        row[k++] = static_cast<float>(image.at(y, x, ch));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

FeatureGrid read_pfm(const std::string& path) {
  auto in = open_in(path, true);
  std::string tag;
  int w = 0, h = 0;
  double scale = 0.0;
  if (!(in >> tag >> w >> h >> scale)) throw IoError(path + ": malformed PFM header");
  if (tag != "PF" && tag != "Pf") throw IoError(path + ": not a PFM file (tag '" + tag + "')");
  if (w < 1 || h < 1) throw IoError(path + ": invalid PFM dimensions");
  if (!(scale < 0.0)) throw IoError(path + ": big-endian PFM data is not supported");
  in.get();  // the single whitespace byte after the scale
  const int c = tag == "PF" ? 3 : 1;
  FeatureGrid image = FeatureGrid::zeros(h, w, c);
  std::vector<float> row(static_cast<std::size_t>(w) * c);
  const double factor = -scale;
  for (int y = h - 1; y >= 0; --y) {
    if (!in.read(reinterpret_cast<char*>(row.data()),
                 static_cast<std::streamsize>(row.size() * sizeof(float)))) {
      throw IoError(path + ": truncated PFM pixel data");
    }
    std::size_t k = 0;
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        image.at(y, x, ch) = factor * static_cast<double>(row[k++]);
      }
    }
  }
  return image;
}

// ---- pairwise matrices -----------------------------------------------------

void save_pairwise(const std::string& path, const std::vector<PairwiseRecord>& records) {
  auto out = open_out(path);
  for (const PairwiseRecord& rec : records) {
    check_id(rec.id);
    if (rec.pr.n != rec.pm.n) {
      throw DimensionError("pairwise matrices for '" + rec.id + "' differ in size");
    }
    out << rec.id << " " << rec.pr.n << "\n";
    for (const PairwiseMatrix* m : {&rec.pr, &rec.pm}) {
      for (int i = 0; i < m->n; ++i) {
        for (int j = 0; j < m->n; ++j) {
          out << (j ? " " : "") << fmt(m->at(i, j));
        }
        out << "\n";
      }
    }
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

std::vector<PairwiseRecord> load_pairwise(const std::string& path) {
  auto in = open_in(path);
  std::vector<PairwiseRecord> records;
  std::string id;
  int line_no = 0;
  while (true) {
    std::string raw;
    if (!std::getline(in, raw)) break;
    ++line_no;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream hs(raw);
    PairwiseRecord rec;
    rec.id = parse_token<std::string>(hs, path, line_no, "image id");
    const int n = parse_token<int>(hs, path, line_no, "matrix size");
    if (n < 0) fail_at(path, line_no, "matrix size must be nonnegative", true);
    expect_end(hs, path, line_no);
    rec.pr = PairwiseMatrix::make(n);
    rec.pm = PairwiseMatrix::make(n);
    for (PairwiseMatrix* m : {&rec.pr, &rec.pm}) {
      for (int i = 0; i < n; ++i) {
        if (!std::getline(in, raw)) {
          fail_at(path, line_no, "truncated pairwise matrix block", true);
        }
        ++line_no;
        std::istringstream rs(raw);
        for (int j = 0; j < n; ++j) {
          m->at(i, j) = parse_token<double>(rs, path, line_no, "matrix entry");
        }
        expect_end(rs, path, line_no);
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

// ---- selection traces ------------------------------------------------------

void save_selection_traces(const std::string& path, const std::vector<std::string>& ids,
                           const std::vector<SelectionResult>& traces) {
  if (ids.size() != traces.size()) {
    throw DimensionError("selection trace ids and results differ in length");
  }
  auto out = open_out(path);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << "image " << ids[i] << "\n";
    for (std::size_t s = 0; s < traces[i].steps.size(); ++s) {
      const SelectionStep& step = traces[i].steps[s];
      out << "  step " << s + 1 << ": select " << step.selected << ", remove [";
      for (std::size_t r = 0; r < step.removed.size(); ++r) {
        out << (r ? " " : "") << step.removed[r];
      }
      out << "]\n";
    }
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  const Topology& t = ckpt.detector.topo;
  header["topology"] = {
      {"in_channels", t.in_channels},
      {"stage_channels", t.stage_channels},
      {"attention_n", t.attention_n},
      {"sigma", t.sigma},
      {"pool_threshold", t.pool_threshold},
      {"fc_width", t.fc_width},
      {"attention", to_string(t.attention)},
  };
  header["siamese_hidden"] = ckpt.rank.fc_in.out;
  const std::string blob = header.dump();

  auto out = open_out(path, true);
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u64(out, blob.size());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  const auto tensors = collect_tensors(ckpt);
  put_u64(out, tensors.size());
  for (const NamedTensor& tensor : tensors) {
    put_u32(out, static_cast<std::uint32_t>(tensor.name.size()));
    out.write(tensor.name.data(), static_cast<std::streamsize>(tensor.name.size()));
    put_u32(out, static_cast<std::uint32_t>(tensor.dims.size()));
    std::uint64_t total = 1;
    for (std::uint64_t d : tensor.dims) {
      put_u64(out, d);
      total *= d;
    }
    if (total != tensor.data->size()) {
      throw ValidationError("tensor '" + tensor.name + "' size mismatch while saving");
    }
    out.write(reinterpret_cast<const char*>(tensor.data->data()),
              static_cast<std::streamsize>(total * sizeof(double)));
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  auto in = open_in(path, true);
  char magic[4] = {};
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError(path + ": not a checkpoint file");
  }
  const std::uint32_t version = get_u32(in, path);
  if (version != kVersion) {
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t blob_len = get_u64(in, path);
  std::string blob(blob_len, '\0');
  if (!in.read(blob.data(), static_cast<std::streamsize>(blob_len))) {
    throw IoError(path + ": truncated checkpoint header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad checkpoint header: " + e.what());
  }

  Topology topo;
  Checkpoint ckpt;
  int hidden = 0;
  try {
    const nlohmann::json& tj = header.at("topology");
    topo.in_channels = tj.at("in_channels").get<int>();
    const auto sc = tj.at("stage_channels").get<std::vector<int>>();
    if (sc.size() != topo.stage_channels.size()) {
      throw IoError(path + ": checkpoint declares " + std::to_string(sc.size()) +
                    " stages, expected " + std::to_string(topo.stage_channels.size()));
    }
    std::copy(sc.begin(), sc.end(), topo.stage_channels.begin());
    topo.attention_n = tj.at("attention_n").get<int>();
    topo.sigma = tj.at("sigma").get<double>();
    topo.pool_threshold = tj.at("pool_threshold").get<double>();
    topo.fc_width = tj.at("fc_width").get<int>();
    topo.attention = attention_mode_from_string(tj.at("attention").get<std::string>());
    hidden = header.at("siamese_hidden").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad checkpoint header: " + e.what());
  }

  ckpt.detector = make_detector(topo, 0);
  ckpt.rank = make_siamese(topo.fc_width, hidden, 0);
  ckpt.match = make_siamese(topo.fc_width, hidden, 0);

  auto slots = collect_slots(ckpt);
  std::map<std::string, bool> filled;
  for (const auto& [name, slot] : slots) filled[name] = false;

  const std::uint64_t count = get_u64(in, path);
  for (std::uint64_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = get_u32(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw IoError(path + ": truncated checkpoint");
    const std::uint32_t ndim = get_u32(in, path);
    std::vector<std::uint64_t> dims(ndim);
    std::uint64_t total = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      dims[d] = get_u64(in, path);
      total *= dims[d];
    }
    const auto it = slots.find(name);
    if (it == slots.end()) throw IoError(path + ": unknown tensor '" + name + "'");
    if (dims != it->second.dims) throw IoError(path + ": tensor '" + name + "' has wrong shape");
    if (total != it->second.data->size()) {
      throw IoError(path + ": tensor '" + name + "' has wrong element count");
    }
    if (!in.read(reinterpret_cast<char*>(it->second.data->data()),
                 static_cast<std::streamsize>(total * sizeof(double)))) {
      throw IoError(path + ": truncated tensor data for '" + name + "'");
    }
    filled[name] = true;
  }
  for (const auto& [name, ok] : filled) {
    if (!ok) throw IoError(path + ": checkpoint is missing tensor '" + name + "'");
  }
  return ckpt;
}

// ---- config files ----------------------------------------------------------

std::map<std::string, std::string> load_config_map(const std::string& path) {
  auto in = open_in(path);
  std::map<std::string, std::string> out;
  std::string raw;
  int line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, raw)) {
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const std::string body = trim(raw);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      std::ostringstream os;
      os << path << ":" << line_no << ": expected key=value";
      throw ConfigError(os.str());
    }
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (key.empty()) {
      std::ostringstream os;
      os << path << ":" << line_no << ": empty key";
      throw ConfigError(os.str());
    }
    if (!out.emplace(key, value).second) {
      std::ostringstream os;
      os << path << ":" << line_no << ": duplicate key '" << key << "'";
      throw ConfigError(os.str());
    }
  }
  return out;
}

}  // namespace semline
