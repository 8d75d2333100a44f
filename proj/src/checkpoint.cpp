#include "tepo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace tepo {

namespace {

constexpr char kMagic[8] = {'T', 'E', 'P', 'O', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put(std::string& out, T v) {
  std::uint64_t bits = 0;
  if constexpr (std::is_same_v<T, double>) {
    bits = std::bit_cast<std::uint64_t>(v);
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}

  template <typename T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > s_.size()) {
      throw CheckpointError(std::string("truncated checkpoint: missing ") + what + " at byte " +
                            std::to_string(pos_));
    }
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    if constexpr (std::is_same_v<T, double>) {
      return std::bit_cast<double>(bits);
    } else {
      return static_cast<T>(bits);
    }
  }

  bool done() const { return pos_ == s_.size(); }
  std::size_t remaining() const { return s_.size() - pos_; }

 private:
  const std::string& s_;
  std::size_t pos_ = 8;
};

}  // namespace

std::string encode_checkpoint(const TrainerState& state) {
  const auto& p = state.policy;
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, p.kind() == PolicyKind::tabular ? 0u : 1u);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(p.vocab().size));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(p.context_order()));
  put<std::uint64_t>(out, p.param_count());
  put<std::uint64_t>(out, static_cast<std::uint64_t>(state.step));
  put<double>(out, state.best_eval);
  put<std::int64_t>(out, state.steps_to_threshold);
  if (p.kind() == PolicyKind::tabular) {
    put<std::uint64_t>(out, p.row_keys().size());
    for (auto k : p.row_keys()) put<std::uint64_t>(out, k);
  }
  for (double v : p.params()) put<double>(out, v);
  return out;
}

TrainerState decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a checkpoint: bad magic");
  }
  Reader r(bytes);
  const auto version = r.get<std::uint32_t>("format_version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format_version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto kind = r.get<std::uint32_t>("kind");
  const auto vocab = r.get<std::uint32_t>("vocab_size");
  const auto order = r.get<std::uint32_t>("context_order");
  const auto count = r.get<std::uint64_t>("param_count");
  if (kind > 1) throw CheckpointError("checkpoint: unknown policy kind " + std::to_string(kind));
  if (vocab < 2 || vocab > 4096 || order < 1 || order > SoftmaxPolicy::kMaxContextOrder) {
    throw CheckpointError("checkpoint: implausible header (vocab_size " + std::to_string(vocab) +
                          ", context_order " + std::to_string(order) + ")");
  }
  TrainerState st;
  st.step = static_cast<std::int64_t>(r.get<std::uint64_t>("step"));
  st.best_eval = r.get<double>("best_eval");
  st.steps_to_threshold = r.get<std::int64_t>("steps_to_threshold");
  const Vocabulary v(static_cast<int>(vocab));
  const int o = static_cast<int>(order);
  std::vector<std::uint64_t> keys;
  if (kind == 0) {
    const auto rows = r.get<std::uint64_t>("row_count");
    if (rows > r.remaining() / 8) throw CheckpointError("truncated checkpoint: row keys");
    keys.reserve(rows);
    for (std::uint64_t i = 0; i < rows; ++i) keys.push_back(r.get<std::uint64_t>("row key"));
  }
  if (count > r.remaining() / 8) throw CheckpointError("truncated checkpoint: parameters");
  std::vector<double> params(count);
  for (auto& x : params) x = r.get<double>("parameter");
  if (!r.done()) throw CheckpointError("checkpoint has trailing bytes");
  if (kind == 0) {
    st.policy = SoftmaxPolicy::tabular(v, o);
    try {
      st.policy.restore_tabular_rows(std::move(keys), std::move(params));
    } catch (const std::exception& e) {
      throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
  } else {
    st.policy = SoftmaxPolicy::linear(v, o);
    if (st.policy.param_count() != count) throw CheckpointError("checkpoint: linear parameter count mismatch");
    std::copy(params.begin(), params.end(), st.policy.params().begin());
  }
  return st;
}

void save_checkpoint(const TrainerState& state, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(state);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

TrainerState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

std::string checkpoint_text_dump(const TrainerState& state) {
  const auto& p = state.policy;
  std::ostringstream os;
  os << std::setprecision(17);
  os << "format_version " << kCheckpointVersion << "\n"
     << "kind " << (p.kind() == PolicyKind::tabular ? "tabular" : "linear") << "\n"
     << "vocab_size " << p.vocab().size << "\n"
     << "context_order " << p.context_order() << "\n"
     << "param_count " << p.param_count() << "\n"
     << "step " << state.step << "\n"
     << "best_eval " << state.best_eval << "\n"
     << "steps_to_threshold " << state.steps_to_threshold << "\n";
  const auto V = static_cast<std::size_t>(p.vocab().size);
  const auto params = p.params();
  if (p.kind() == PolicyKind::tabular) {
    for (std::size_t r = 0; r < p.row_keys().size(); ++r) {
      os << "row " << p.row_keys()[r] << ":";
      for (std::size_t a = 0; a < V; ++a) os << ' ' << params[r * V + a];
      os << "\n";
    }
  } else {
    for (std::size_t i = 0; i < params.size(); i += V) {
      os << "block " << i / V << ":";
      for (std::size_t a = 0; a < V && i + a < params.size(); ++a) os << ' ' << params[i + a];
      os << "\n";
    }
  }
  return os.str();
}

}  // namespace tepo
