#include "atomicl/icl/tokenizer.hpp"

#include <sstream>
#include <stdexcept>
#include <string>

namespace atomicl::icl {

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("model." + field + ": " + why);
  };
  if (layers < 1) fail("layers", "must be >= 1");
  if (embed_dim < 1) fail("embed_dim", "must be >= 1");
  if (heads < 1) fail("heads", "must be >= 1");
  if (embed_dim % heads != 0) fail("heads", "embed_dim must be divisible by heads");
  if (ffn_dim < 1) fail("ffn_dim", "must be >= 1");
  if (max_pairs < 1) fail("max_pairs", "must be >= 1");
  if (users < 1) fail("users", "must be >= 1");
  if (antennas < 1) fail("antennas", "must be >= 1");
}

std::string describe(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "N_L=" << cfg.layers << " D_E=" << cfg.embed_dim << " N_H=" << cfg.heads
     << " D_F=" << cfg.ffn_dim << " D_T=" << cfg.token_dim() << " L=" << cfg.max_pairs
     << " K=" << cfg.users << " N=" << cfg.antennas << " pos=" << (cfg.positional ? "on" : "off");
  return os.str();
}

TokenSeq tokenize(const RMat& z_lin, const CMat& phi, const std::optional<RVec>& query,
                  const ModelConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(cfg.antennas);
  const auto k = static_cast<Eigen::Index>(cfg.users);
  const Eigen::Index pairs = phi.cols();
  if (phi.rows() != k)
    throw std::invalid_argument("tokenize: symbol vectors have " + std::to_string(phi.rows()) +
                                " entries, model expects K=" + std::to_string(k));
  if (z_lin.cols() != pairs)
    throw std::invalid_argument("tokenize: " + std::to_string(z_lin.cols()) + " measurements for " +
                                std::to_string(pairs) + " symbol vectors");
  if (pairs > 0 && z_lin.rows() != n)
    throw std::invalid_argument("tokenize: measurements have " + std::to_string(z_lin.rows()) +
                                " entries, model expects N=" + std::to_string(n));
  if (query && query->size() != n)
    throw std::invalid_argument("tokenize: query has " + std::to_string(query->size()) +
                                " entries, model expects N=" + std::to_string(n));
  if (static_cast<std::size_t>(pairs) > cfg.max_pairs)
    throw std::invalid_argument("tokenize: P=" + std::to_string(pairs) + " exceeds L=" +
                                std::to_string(cfg.max_pairs));

  const Eigen::Index count = 2 * pairs + (query ? 1 : 0);
  TokenSeq seq;
  seq.tokens = RMat::Zero(count, static_cast<Eigen::Index>(cfg.token_dim()));
  seq.roles.reserve(static_cast<std::size_t>(count));
  for (Eigen::Index p = 0; p < pairs; ++p) {
    seq.tokens.row(2 * p).head(n) = z_lin.col(p).transpose();
    seq.roles.push_back(TokenRole::measurement);
    seq.tokens.row(2 * p + 1).head(k) = phi.col(p).real().transpose();
    seq.tokens.row(2 * p + 1).segment(k, k) = phi.col(p).imag().transpose();
    seq.roles.push_back(TokenRole::symbol);
  }
  if (query) {
    seq.tokens.row(count - 1).head(n) = query->transpose();
    seq.roles.push_back(TokenRole::query);
  }
  return seq;
}

}  // namespace atomicl::icl
