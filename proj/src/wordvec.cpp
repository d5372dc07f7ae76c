#include "kbqa/wordvec.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>

#include "kbqa/autodiff.hpp"
#include "kbqa/errors.hpp"
#include "kbqa/kb.hpp"

namespace kbqa {

namespace {

bool is_separator(std::string_view s, std::size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  if (c >= 0x80) return false;
  if (std::isspace(c)) return true;
  if (!std::ispunct(c)) return false;
  if ((c == '.' || c == ',') && i > 0 && i + 1 < s.size() &&
      std::isdigit(static_cast<unsigned char>(s[i - 1])) && std::isdigit(static_cast<unsigned char>(s[i + 1]))) {
    return false;
  }
  return true;
}

void accumulate_phrase(std::string_view phrase, const WordVectorTable& table, std::span<double> out) {
  const auto tokens = tokenize(phrase);
  if (tokens.empty()) throw DegenerateInputError("phrase '" + std::string(phrase) + "' has no tokens");
  std::size_t known = 0;
  for (const auto& tok : tokens) {
    if (const double* v = table.find(tok)) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
      ++known;
    }
  }
  if (known == 0) {
    table.note_all_oov();
    return;
  }
  for (double& x : out) x /= static_cast<double>(known);
}

}  // namespace

std::vector<std::string> tokenize(std::string_view phrase) {
  std::vector<std::string> tokens;
  std::string cur;
  for (std::size_t i = 0; i < phrase.size(); ++i) {
    if (is_separator(phrase, i)) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else {
      const auto c = static_cast<unsigned char>(phrase[i]);
      cur += c < 0x80 ? static_cast<char>(std::tolower(c)) : phrase[i];
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

WordVectorTable::WordVectorTable(std::size_t dim) : dim_(dim) {
  if (dim == 0) throw UsageError("WordVectorTable: dim must be positive");
}

bool WordVectorTable::contains(std::string_view token) const { return find(token) != nullptr; }

const double* WordVectorTable::find(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? nullptr : data_.data() + it->second * dim_;
}

bool WordVectorTable::set(const std::string& token, std::span<const double> vec) {
  if (vec.size() != dim_) throw ShapeError("WordVectorTable::set: vector length " + std::to_string(vec.size()));
  const auto [it, inserted] = index_.emplace(token, index_.size());
  if (inserted) data_.resize(data_.size() + dim_);
  std::copy(vec.begin(), vec.end(), data_.begin() + static_cast<std::ptrdiff_t>(it->second * dim_));
  return inserted;
}

double WordVectorTable::max_norm() const {
  double best = 0.0;
  for (std::size_t r = 0; r < index_.size(); ++r) best = std::max(best, norm({data_.data() + r * dim_, dim_}));
  return best;
}

WordVectorTable load_vectors(std::istream& in, std::size_t dim, const std::string& source) {
  WordVectorTable table(dim);
  std::string line;
  std::size_t lineno = 0;
  std::vector<double> vec(dim);
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::string_view rest(line);
    const std::size_t sp = rest.find(' ');
    if (sp == std::string_view::npos || sp == 0) throw LoadError(source, lineno, "expected token followed by " + std::to_string(dim) + " values");
    const std::string token(rest.substr(0, sp));
    rest.remove_prefix(sp + 1);
    std::size_t n = 0;
    while (!rest.empty()) {
      while (!rest.empty() && rest.front() == ' ') rest.remove_prefix(1);
      if (rest.empty()) break;
      const std::size_t end = std::min(rest.find(' '), rest.size());
      if (n == dim) throw LoadError(source, lineno, "row has more than " + std::to_string(dim + 1) + " fields");
      const auto res = std::from_chars(rest.data(), rest.data() + end, vec[n]);
      if (res.ec != std::errc() || res.ptr != rest.data() + end || !std::isfinite(vec[n])) {
        throw LoadError(source, lineno, "bad number '" + std::string(rest.substr(0, end)) + "'");
      }
      ++n;
      rest.remove_prefix(end);
    }
    if (n != dim) {
      throw LoadError(source, lineno, "row has " + std::to_string(n + 1) + " fields, expected " + std::to_string(dim + 1));
    }
    if (!table.set(token, vec)) table.note_duplicate();
  }
  return table;
}

WordVectorTable load_vectors(const std::string& path, std::size_t dim) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open word-vector file '" + path + "'");
  return load_vectors(in, dim, path);
}

std::vector<double> phrase_embedding(std::string_view phrase, const WordVectorTable& table) {
  if (table.empty()) throw UsageError("phrase_embedding: empty word-vector table");
  std::vector<double> out(table.dim(), 0.0);
  accumulate_phrase(phrase, table, out);
  return out;
}

std::vector<double> fact_embedding(const Fact& fact, const WordVectorTable& table) {
  const std::size_t d = table.dim();
  std::vector<double> out(2 * d, 0.0);
  const auto subject = phrase_embedding(fact.subject, table);
  std::copy(subject.begin(), subject.end(), out.begin());
  const std::string object = fact.relation_suffix.empty() ? fact.object : fact.relation_suffix + " " + fact.object;
  const auto obj = phrase_embedding(object, table);
  std::copy(obj.begin(), obj.end(), out.begin() + static_cast<std::ptrdiff_t>(d));
  return out;
}

FactMatrix::FactMatrix(const KnowledgeBase& kb, const WordVectorTable& table) : dim_(2 * table.dim()) {
  data_.reserve(kb.size() * dim_);
  norms_.reserve(kb.size());
  for (const Fact& f : kb.facts()) {
    const auto e = fact_embedding(f, table);
    data_.insert(data_.end(), e.begin(), e.end());
    norms_.push_back(norm(e));
  }
}

}  // namespace kbqa
