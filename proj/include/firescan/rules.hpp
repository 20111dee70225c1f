#pragma once

#include <cctype>
#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "firescan/error.hpp"
#include "firescan/raster_io.hpp"

namespace firescan {

// Reflectances by (rule-side) band index.
struct PixelSpectrum {
  std::map<int, double> rho;

  double band(int i) const {
    auto it = rho.find(i);
    require(it != rho.end(), ErrorCode::config, "pixel has no band " + std::to_string(i));
    return it->second;
  }
  // R_ij; undefined when rho_j <= 0.
  std::optional<double> ratio(int i, int j) const {
    const double d = band(j);
    if (!(d > 0)) return std::nullopt;
    return band(i) / d;
  }
};

// ---- expression tree ---------------------------------------------------

struct RuleTerm {
  enum class Kind { band, diff, ratio };
  Kind kind = Kind::band;
  int i = 0;
  int j = 0;  // diff: b_i - b_j; ratio: r(i,j)
  friend bool operator==(const RuleTerm&, const RuleTerm&) = default;
};

enum class Cmp { greater, less };

struct Predicate {
  RuleTerm term;
  Cmp cmp = Cmp::greater;
  double value = 0;
  friend bool operator==(const Predicate&, const Predicate&) = default;
};

struct RuleExpr {
  enum class Kind { predicate, all, any };
  Kind kind = Kind::predicate;
  Predicate pred;
  std::vector<RuleExpr> children;  // all/any: two or more
  friend bool operator==(const RuleExpr&, const RuleExpr&) = default;
};

// Strict comparisons throughout; a ratio with a non-positive denominator is false.
inline bool evaluate(const Predicate& p, const PixelSpectrum& px) {
  double v = 0;
  switch (p.term.kind) {
    case RuleTerm::Kind::band: v = px.band(p.term.i); break;
    case RuleTerm::Kind::diff: v = px.band(p.term.i) - px.band(p.term.j); break;
    case RuleTerm::Kind::ratio: {
      const auto r = px.ratio(p.term.i, p.term.j);
      if (!r) return false;
      v = *r;
      break;
    }
  }
  return p.cmp == Cmp::greater ? v > p.value : v < p.value;
}

inline bool evaluate(const RuleExpr& e, const PixelSpectrum& px) {
  switch (e.kind) {
    case RuleExpr::Kind::predicate: return evaluate(e.pred, px);
    case RuleExpr::Kind::all:
      for (const auto& c : e.children)
        if (!evaluate(c, px)) return false;
      return true;
    case RuleExpr::Kind::any:
      for (const auto& c : e.children)
        if (evaluate(c, px)) return true;
      return false;
  }
  return false;
}

inline void collect_predicates(const RuleExpr& e, std::vector<Predicate>& out) {
  if (e.kind == RuleExpr::Kind::predicate)
    out.push_back(e.pred);
  else
    for (const auto& c : e.children) collect_predicates(c, out);
}

inline std::vector<Predicate> predicates(const RuleExpr& e) {
  std::vector<Predicate> out;
  collect_predicates(e, out);
  return out;
}

inline std::set<int> referenced_bands(const RuleExpr& e) {
  std::set<int> out;
  for (const auto& p : predicates(e)) {
    out.insert(p.term.i);
    if (p.term.kind != RuleTerm::Kind::band) out.insert(p.term.j);
  }
  return out;
}

// ---- printing ----------------------------------------------------------

// Shortest text that parses back to the same double.
inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string to_string(const RuleTerm& t) {
  switch (t.kind) {
    case RuleTerm::Kind::band: return "b" + std::to_string(t.i);
    case RuleTerm::Kind::diff: return "(b" + std::to_string(t.i) + " - b" + std::to_string(t.j) + ")";
    case RuleTerm::Kind::ratio: return "r(" + std::to_string(t.i) + "," + std::to_string(t.j) + ")";
  }
  return "?";
}

inline std::string to_string(const Predicate& p) {
  return to_string(p.term) + (p.cmp == Cmp::greater ? " > " : " < ") + format_number(p.value);
}

inline std::string to_string(const RuleExpr& e) {
  if (e.kind == RuleExpr::Kind::predicate) return to_string(e.pred);
  const char* op = e.kind == RuleExpr::Kind::all ? " & " : " | ";
  std::string out;
  for (std::size_t k = 0; k < e.children.size(); ++k) {
    const auto& c = e.children[k];
    if (k) out += op;
    if (c.kind == RuleExpr::Kind::predicate)
      out += to_string(c);
    else
      out += "(" + to_string(c) + ")";
  }
  return out;
}

// ---- parsing -----------------------------------------------------------
//
//   expr  := conj ('|' conj)*
//   conj  := atom ('&' atom)*
//   atom  := pred | '(' expr ')'
//   pred  := term ('>' | '<') number
//   term  := 'b' INT ['-' 'b' INT] | 'r' '(' INT ',' INT ')' | '(' term ')'

namespace detail {

class RuleParser {
 public:
  explicit RuleParser(std::string_view text) : s_(text) {}

  RuleExpr parse() {
    RuleExpr e = expr();
    skip();
    if (pos_ != s_.size()) fail("unexpected '" + std::string(1, s_[pos_]) + "'");
    return e;
  }

 private:
  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  bool peek(char c) {
    skip();
    return pos_ < s_.size() && s_[pos_] == c;
  }
  bool accept(char c) {
    if (!peek(c)) return false;
    ++pos_;
    return true;
  }
  [[noreturn]] void fail(const std::string& what) const { throw SyntaxError(pos_, what); }
  void expect(char c) {
    if (!accept(c)) fail(std::string("expected '") + c + "'");
  }

  int integer() {
    skip();
    int v = 0;
    auto res = std::from_chars(s_.data() + pos_, s_.data() + s_.size(), v);
    if (res.ec != std::errc() || v < 1) fail("expected a band number");
    pos_ = static_cast<std::size_t>(res.ptr - s_.data());
    return v;
  }

  double number() {
    skip();
    double v = 0;
    auto res = std::from_chars(s_.data() + pos_, s_.data() + s_.size(), v);
    if (res.ec != std::errc() || !std::isfinite(v)) fail("expected a number");
    pos_ = static_cast<std::size_t>(res.ptr - s_.data());
    return v;
  }

  int band_ref() {
    expect('b');
    return integer();
  }

  RuleTerm term() {
    if (accept('(')) {
      RuleTerm t = term();
      expect(')');
      return t;
    }
    if (accept('r')) {
      expect('(');
      RuleTerm t{RuleTerm::Kind::ratio, integer(), 0};
      expect(',');
      t.j = integer();
      expect(')');
      return t;
    }
    if (!peek('b')) fail("expected a band term");
    RuleTerm t{RuleTerm::Kind::band, band_ref(), 0};
    if (accept('-')) {
      t.kind = RuleTerm::Kind::diff;
      t.j = band_ref();
    }
    return t;
  }

  RuleExpr predicate() {
    RuleExpr e;
    e.pred.term = term();
    if (accept('>'))
      e.pred.cmp = Cmp::greater;
    else if (accept('<'))
      e.pred.cmp = Cmp::less;
    else
      fail("expected '>' or '<'");
    e.pred.value = number();
    return e;
  }

  // A '(' may open either a grouped term or a sub-expression; try the
  // predicate reading first and keep whichever error got further.
  RuleExpr atom() {
    skip();
    const std::size_t start = pos_;
    try {
      return predicate();
    } catch (const SyntaxError& first) {
      pos_ = start;
      if (!accept('(')) throw;
      try {
        RuleExpr e = expr();
        expect(')');
        return e;
      } catch (const SyntaxError& second) {
        if (first.offset() > second.offset()) throw first;
        throw;
      }
    }
  }

  RuleExpr chain(RuleExpr::Kind kind, char op) {
    RuleExpr first = kind == RuleExpr::Kind::all ? atom() : chain(RuleExpr::Kind::all, '&');
    if (!peek(op)) return first;
    RuleExpr e;
    e.kind = kind;
    e.children.push_back(std::move(first));
    while (accept(op)) e.children.push_back(kind == RuleExpr::Kind::all ? atom() : chain(RuleExpr::Kind::all, '&'));
    return e;
  }

  RuleExpr expr() { return chain(RuleExpr::Kind::any, '|'); }

  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline RuleExpr parse_rule(std::string_view text) { return detail::RuleParser(text).parse(); }

// ---- Schroeder unambiguous-fire rule -------------------------------------

inline constexpr std::string_view kSchroederRule =
    "(r(7,5) > 2.5 & (b7 - b5) > 0.3 & b7 > 0.5) | (b6 > 0.8 & b1 < 0.2 & (b5 > 0.4 | b7 < 0.1))";

inline RuleExpr schroeder_expr() { return parse_rule(kSchroederRule); }

// Direct form of the same rule, kept separate from the tree evaluator.
inline bool schroeder_rule(const PixelSpectrum& px) {
  const double r1 = px.band(1), r5 = px.band(5), r6 = px.band(6), r7 = px.band(7);
  const bool ratio_ok = r5 > 0 && r7 / r5 > 2.5;
  const bool clause1 = ratio_ok && (r7 - r5) > 0.3 && r7 > 0.5;
  const bool clause2 = r6 > 0.8 && r1 < 0.2 && (r5 > 0.4 || r7 < 0.1);
  return clause1 || clause2;
}

// ---- band mapping and image application --------------------------------

// Rule band index -> raster band index (both 1-based).
using BandMapping = std::map<int, int>;

// Landsat-8 OLI bands to the nearest AMS band by wavelength.
inline BandMapping schroeder_ams_mapping() { return {{1, 2}, {5, 7}, {6, 9}, {7, 10}}; }

inline BandMapping identity_mapping(const RuleExpr& e) {
  BandMapping m;
  for (int b : referenced_bands(e)) m[b] = b;
  return m;
}

inline BandMapping parse_band_mapping(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::config, "band mapping must be an object of rule band -> raster band");
  BandMapping m;
  for (auto it = j.begin(); it != j.end(); ++it) {
    int rule_band = 0;
    auto res = std::from_chars(it.key().data(), it.key().data() + it.key().size(), rule_band);
    require(res.ec == std::errc() && rule_band >= 1, ErrorCode::config, "bad rule band '" + it.key() + "'");
    require(it.value().is_number_integer(), ErrorCode::config, "band mapping values must be integers");
    m[rule_band] = it.value().get<int>();
  }
  return m;
}

namespace detail {

struct BandViews {
  std::map<int, std::span<const float>> by_rule_band;
};

inline void eval_predicate(const Predicate& p, const BandViews& v, std::vector<std::uint8_t>& out) {
  const auto a = v.by_rule_band.at(p.term.i);
  const std::size_t n = a.size();
  const double c = p.value;
  const bool gt = p.cmp == Cmp::greater;
  switch (p.term.kind) {
    case RuleTerm::Kind::band:
      for (std::size_t i = 0; i < n; ++i) {
        const double x = a[i];
        out[i] = gt ? x > c : x < c;
      }
      break;
    case RuleTerm::Kind::diff: {
      const auto b = v.by_rule_band.at(p.term.j);
      for (std::size_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        out[i] = gt ? x > c : x < c;
      }
      break;
    }
    case RuleTerm::Kind::ratio: {
      const auto b = v.by_rule_band.at(p.term.j);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = b[i];
        const double x = static_cast<double>(a[i]) / d;
        out[i] = d > 0 && (gt ? x > c : x < c);
      }
      break;
    }
  }
}

inline std::vector<std::uint8_t> eval_expr(const RuleExpr& e, const BandViews& v, std::size_t n) {
  std::vector<std::uint8_t> out(n);
  if (e.kind == RuleExpr::Kind::predicate) {
    eval_predicate(e.pred, v, out);
    return out;
  }
  const bool all = e.kind == RuleExpr::Kind::all;
  std::fill(out.begin(), out.end(), all ? 1 : 0);
  for (const auto& c : e.children) {
    const auto sub = eval_expr(c, v, n);
    for (std::size_t i = 0; i < n; ++i) out[i] = all ? (out[i] & sub[i]) : (out[i] | sub[i]);
  }
  return out;
}

}  // namespace detail

// Evaluate the rule on every pixel of a normalized image.
inline MaskImage apply_rule(const RasterImage& image, const RuleExpr& rule, const BandMapping& mapping) {
  require(image.units_state == UnitsState::normalized, ErrorCode::state, "apply_rule needs a normalized image");
  detail::BandViews views;
  for (int b : referenced_bands(rule)) {
    auto it = mapping.find(b);
    require(it != mapping.end(), ErrorCode::config, "band mapping has no entry for rule band " + std::to_string(b));
    const auto pos = image.find_band(it->second);
    require(pos.has_value(), ErrorCode::config,
            "rule band " + std::to_string(b) + " maps to raster band " + std::to_string(it->second) +
                ", which the image does not have");
    views.by_rule_band[b] = image.band(*pos);
  }
  MaskImage m = make_mask(image.height, image.width);
  m.data = detail::eval_expr(rule, views, image.plane_size());
  return m;
}

// Spectrum of one pixel under a mapping, for scalar evaluation.
inline PixelSpectrum pixel_spectrum(const RasterImage& image, std::size_t row, std::size_t col,
                                    const BandMapping& mapping) {
  PixelSpectrum px;
  for (const auto& [rule_band, raster_band] : mapping) {
    const auto pos = image.find_band(raster_band);
    require(pos.has_value(), ErrorCode::config, "image lacks raster band " + std::to_string(raster_band));
    px.rho[rule_band] = image.at(*pos, row, col);
  }
  return px;
}

}  // namespace firescan
