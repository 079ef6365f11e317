#include "cubevit/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <json.hpp>

#include "cubevit/errors.hpp"

namespace cubevit {

using nlohmann::json;

namespace {

constexpr std::string_view kOptimPrefix = "optim.";

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void save(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot open " + path.string() + " for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw UsageError("write failed for " + path.string());
  }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open " + path.string());
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw FormatError(std::string("truncated file while reading ") + what, pos_);
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f32(const char* what) { return static_cast<double>(std::bit_cast<float>(u32(what))); }
  void expect_magic(std::string_view magic) {
    if (remaining() < magic.size() || std::string_view(buf_.data(), magic.size()) != magic) {
      throw FormatError("bad magic, expected " + std::string(magic), 0);
    }
    pos_ = magic.size();
  }
  void expect_end() const {
    if (remaining() != 0) throw FormatError("trailing bytes after payload", pos_);
  }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

json meta_json(const ImageMeta& m) {
  return {{"patient_id", m.patient_id},
          {"laterality", to_string(m.laterality)},
          {"modality", m.modality},
          {"spacing_mm", m.spacing_mm},
          {"steps", m.steps}};
}

ImageMeta meta_from_json(const json& j) {
  ImageMeta m;
  m.patient_id = j.at("patient_id").get<std::string>();
  m.laterality = parse_laterality(j.at("laterality").get<std::string>());
  m.modality = j.at("modality").get<std::string>();
  m.spacing_mm = j.at("spacing_mm").get<std::array<double, 3>>();
  if (j.contains("steps")) m.steps = j.at("steps").get<std::vector<std::string>>();
  return m;
}

fs::path sidecar(const fs::path& p) { return fs::path(p.string() + ".json"); }

void write_sidecar(const fs::path& p, const ImageMeta& m) {
  std::ofstream out(sidecar(p));
  if (!out) throw UsageError("cannot write " + sidecar(p).string());
  out << meta_json(m).dump(2) << '\n';
}

ImageMeta read_sidecar(const fs::path& p) {
  const auto sc = sidecar(p);
  if (!fs::exists(sc)) return {};
  std::ifstream in(sc);
  try {
    return meta_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw FormatError("bad metadata sidecar " + sc.string() + ": " + e.what(), e.byte);
  } catch (const json::exception& e) {
    throw FormatError("bad metadata sidecar " + sc.string() + ": " + e.what(), 0);
  }
}

std::uint32_t extent32(std::size_t e, const char* what) {
  if (e == 0 || e > 0xffffffffu) throw UsageError(std::string("extent out of range for ") + what);
  return static_cast<std::uint32_t>(e);
}

template <typename T>
T read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw UsageError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("bad JSON in " + p.string() + ": " + e.what(), e.byte);
  }
}

}  // namespace

void write_volume(const fs::path& path, const Volume& v) {
  Writer w;
  w.bytes("VOL1", 4);
  w.u32(extent32(v.depth, "Z"));
  w.u32(extent32(v.height, "H"));
  w.u32(extent32(v.width, "W"));
  for (double x : v.voxels) w.f32(x);
  w.save(path);
  write_sidecar(path, v.meta);
}

Volume read_volume(const fs::path& path) {
  Reader r(path);
  r.expect_magic("VOL1");
  const std::uint32_t z = r.u32("Z"), h = r.u32("H"), w = r.u32("W");
  if (z == 0 || h == 0 || w == 0) throw FormatError("zero extent in volume header", 4);
  const std::uint64_t n = static_cast<std::uint64_t>(z) * h * w;
  r.need(n * 4, "voxel data");
  Volume v(z, h, w);
  for (auto& x : v.voxels) x = r.f32("voxel");
  r.expect_end();
  v.meta = read_sidecar(path);
  return v;
}

void write_enface(const fs::path& path, const EnFaceImage& img) {
  Writer w;
  w.bytes("ENF1", 4);
  w.u32(extent32(img.height, "H"));
  w.u32(extent32(img.width, "W"));
  for (double x : img.pixels) w.f32(x);
  w.save(path);
  write_sidecar(path, img.meta);
}

EnFaceImage read_enface(const fs::path& path) {
  Reader r(path);
  r.expect_magic("ENF1");
  const std::uint32_t h = r.u32("H"), w = r.u32("W");
  if (h == 0 || w == 0) throw FormatError("zero extent in image header", 4);
  r.need(static_cast<std::uint64_t>(h) * w * 4, "pixel data");
  EnFaceImage img(h, w);
  for (auto& x : img.pixels) x = r.f32("pixel");
  r.expect_end();
  img.meta = read_sidecar(path);
  return img;
}

void write_cohort(const fs::path& dir, const std::vector<CohortItem>& items) {
  fs::create_directories(dir);
  json index = json::array();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    char stem[32];
    std::snprintf(stem, sizeof stem, "item_%05zu", i);
    const std::string s(stem);
    write_volume(dir / (s + ".vol"), it.volume);
    write_enface(dir / (s + "_ir.enf"), it.ir);
    write_enface(dir / (s + "_faf.enf"), it.faf);
    index.push_back({{"stem", s},
                     {"label", it.label},
                     {"growth_rate", it.targets.growth_rate},
                     {"lesion_area", it.targets.lesion_area},
                     {"latent_seed", it.latent_seed}});
  }
  std::ofstream out(dir / "cohort.json");
  out << json{{"items", index}}.dump(2) << '\n';
}

std::vector<CohortItem> read_cohort(const fs::path& dir) {
  const json index = read_json_file<json>(dir / "cohort.json");
  std::vector<CohortItem> items;
  try {
    for (const auto& e : index.at("items")) {
      CohortItem it;
      const std::string s = e.at("stem").get<std::string>();
      it.volume = read_volume(dir / (s + ".vol"));
      it.ir = read_enface(dir / (s + "_ir.enf"));
      it.faf = read_enface(dir / (s + "_faf.enf"));
      it.label = e.at("label").get<int>();
      it.targets.growth_rate = e.at("growth_rate").get<double>();
      it.targets.lesion_area = e.at("lesion_area").get<double>();
      it.latent_seed = e.at("latent_seed").get<std::uint64_t>();
      items.push_back(std::move(it));
    }
  } catch (const json::exception& e) {
    throw FormatError("bad cohort index: " + std::string(e.what()), 0);
  }
  return items;
}

void save_checkpoint(const fs::path& path, const ParamStore& params, const AdamW* optimizer) {
  std::vector<std::pair<std::string, Tensor>> entries;
  for (const auto& [name, var] : params) {
    if (name.starts_with(kOptimPrefix)) throw UsageError("parameter name collides with optimizer state: " + name);
    entries.emplace_back(name, var.value());
  }
  if (optimizer) {
    for (const auto& [name, mom] : optimizer->moments()) {
      entries.emplace_back("optim.m." + name, mom.m);
      entries.emplace_back("optim.v." + name, mom.v);
      entries.emplace_back("optim.count." + name, Tensor::scalar(static_cast<double>(mom.count)));
    }
    entries.emplace_back("optim.step", Tensor::scalar(static_cast<double>(optimizer->steps())));
  }
  Writer w;
  w.bytes("OCTK", 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.u64(e);
    for (double x : t.data()) w.f32(x);
  }
  w.save(path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  Reader r(path);
  r.expect_magic("OCTK");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const std::uint32_t count = r.u32("tensor count");
  Checkpoint ck;
  std::map<std::string, std::uint64_t> counts;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const std::uint32_t len = r.u32("name length");
    const std::string name = r.bytes(len, "name");
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 8) throw FormatError("bad rank for " + name, at);
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& e : shape) {
      e = r.u64("extent");
      if (e == 0) throw FormatError("zero extent for " + name, at);
      numel *= e;
    }
    r.need(numel * 4, "tensor data");
    std::vector<double> data(numel);
    for (auto& x : data) x = r.f32("tensor data");
    Tensor t(shape, std::move(data));
    if (!name.starts_with(kOptimPrefix)) {
      ck.params.add(name, std::move(t));
    } else if (name == "optim.step") {
      ck.has_optimizer = true;
      ck.optimizer_step = static_cast<std::uint64_t>(t.item());
    } else if (name.starts_with("optim.m.")) {
      ck.moments[name.substr(8)].m = std::move(t);
    } else if (name.starts_with("optim.v.")) {
      ck.moments[name.substr(8)].v = std::move(t);
    } else if (name.starts_with("optim.count.")) {
      ck.moments[name.substr(12)].count = static_cast<std::uint64_t>(t.item());
    } else {
      throw FormatError("unknown optimizer entry " + name, at);
    }
  }
  r.expect_end();
  return ck;
}

void load_into(const fs::path& path, ParamStore& target, bool allow_missing) {
  const Checkpoint ck = load_checkpoint(path);
  for (const auto& [name, var] : ck.params) {
    if (!target.has(name)) {
      if (allow_missing) continue;
      throw ShapeError("checkpoint tensor " + name + " has no matching parameter");
    }
  }
  target.load_values(ck.params);
}

}  // namespace cubevit
