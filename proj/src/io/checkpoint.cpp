#include "mta/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "mta/errors.hpp"
#include "mta/io.hpp"

namespace mta {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "weight archives assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'T', 'A', 'W'};

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(std::string_view bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }
  const char* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw FormatError("truncated weight archive: " + source_);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string_view training_kind_name(TrainingKind kind) {
  switch (kind) {
    case TrainingKind::Standard: return "standard";
    case TrainingKind::Adversarial: return "adversarial";
    case TrainingKind::Msm: return "msm";
  }
  return "standard";
}

TrainingKind parse_training_kind(std::string_view name) {
  if (name == "standard") return TrainingKind::Standard;
  if (name == "adversarial") return TrainingKind::Adversarial;
  if (name == "msm") return TrainingKind::Msm;
  throw FormatError("unknown training kind '" + std::string(name) + "'");
}

void CheckpointMeta::validate() const {
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw FormatError("checkpoint accuracy outside [0, 1]");
  arch.validate();
}

void to_json(nlohmann::json& j, const CheckpointMeta& m) {
  j = {{"format_version", kWeightFormatVersion},
       {"id", m.id},
       {"arch", m.arch},
       {"dataset", m.dataset},
       {"seed", m.seed},
       {"epochs", m.epochs},
       {"accuracy", m.accuracy},
       {"training_kind", training_kind_name(m.training_kind)},
       {"config_hash", m.config_hash},
       {"extra", m.extra}};
}

void from_json(const nlohmann::json& j, CheckpointMeta& m) {
  try {
    const auto version = j.at("format_version").get<std::uint32_t>();
    if (version != kWeightFormatVersion) {
      throw FormatError("checkpoint metadata version " + std::to_string(version) + " is not supported (expected " +
                        std::to_string(kWeightFormatVersion) + ")");
    }
    m.id = j.at("id").get<std::string>();
    m.arch = j.at("arch").get<ArchitectureSpec>();
    m.dataset = j.at("dataset").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.epochs = j.at("epochs").get<std::size_t>();
    m.accuracy = j.at("accuracy").get<double>();
    m.training_kind = parse_training_kind(j.at("training_kind").get<std::string>());
    m.config_hash = j.value("config_hash", std::string());
    m.extra = j.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
}

fs::path metadata_path(const fs::path& weights_path) {
  fs::path p = weights_path;
  p.replace_extension(".json");
  return p;
}

std::string encode_weights(const Classifier& model) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kWeightFormatVersion);
  const auto& params = model.named_parameters();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    const Tensor& t = p.value.value();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(double));
  }
  return out;
}

void decode_weights(std::string_view bytes, Classifier& model, const std::string& source) {
  Reader r(bytes, source);
  if (std::memcmp(r.take(4), kMagic, 4) != 0) throw FormatError("not a weight archive: " + source);
  const auto version = r.get<std::uint32_t>();
  if (version != kWeightFormatVersion) {
    throw FormatError("weight archive version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kWeightFormatVersion) + "): " + source);
  }
  const auto& params = model.named_parameters();
  const auto count = r.get<std::uint32_t>();
  if (count != params.size()) {
    throw FormatError("weight archive has " + std::to_string(count) + " tensors, model expects " +
                      std::to_string(params.size()) + ": " + source);
  }
  for (const auto& p : params) {
    const auto len = r.get<std::uint32_t>();
    const std::string name(r.take(len), len);
    if (name != p.name) throw FormatError("weight archive tensor '" + name + "' where '" + p.name + "' expected");
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    Tensor& dst = p.value.mutable_value();
    if (shape != dst.shape()) {
      throw FormatError("shape " + shape_string(shape) + " of '" + name + "' does not match model " +
                        shape_string(dst.shape()));
    }
    std::memcpy(dst.ptr(), r.take(dst.size() * sizeof(double)), dst.size() * sizeof(double));
  }
  if (!r.done()) throw FormatError("trailing bytes in weight archive: " + source);
}

void save_checkpoint(const Classifier& model, const CheckpointMeta& meta, const fs::path& weights_path) {
  meta.validate();
  if (!(meta.arch == model.spec())) throw ConfigError("checkpoint metadata architecture differs from the model");
  io::write_file_atomic(weights_path, encode_weights(model));
  io::write_file_atomic(metadata_path(weights_path), nlohmann::json(meta).dump(2) + "\n");
}

CheckpointMeta load_checkpoint_meta(const fs::path& weights_path) {
  const fs::path meta_path = metadata_path(weights_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(meta_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("cannot parse " + meta_path.string() + ": " + e.what());
  }
  auto meta = j.get<CheckpointMeta>();
  meta.validate();
  return meta;
}

LoadedCheckpoint load_checkpoint(const fs::path& weights_path) {
  if (!fs::exists(weights_path)) throw NotFoundError("checkpoint not found: " + weights_path.string());
  CheckpointMeta meta = load_checkpoint_meta(weights_path);
  Classifier model(meta.arch, meta.seed);
  decode_weights(io::read_file(weights_path), model, weights_path.string());
  return {std::move(model), std::move(meta)};
}

}  // namespace mta
