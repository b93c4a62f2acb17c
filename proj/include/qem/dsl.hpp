#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "qem/distributions.hpp"
#include "qem/error.hpp"
#include "qem/graph.hpp"

namespace qem::dsl {

struct SourceSpan {
  std::size_t line = 1;
  std::size_t column = 1;
  std::size_t length = 1;
  bool operator==(const SourceSpan&) const = default;
};

enum class ParseErrorKind { syntax, unknown_identifier, duplicate_name, cycle, plate_mismatch, unsupported_family };

inline std::string_view to_string(ParseErrorKind k) {
  switch (k) {
    case ParseErrorKind::syntax: return "syntax";
    case ParseErrorKind::unknown_identifier: return "unknown-identifier";
    case ParseErrorKind::duplicate_name: return "duplicate-name";
    case ParseErrorKind::cycle: return "cycle";
    case ParseErrorKind::plate_mismatch: return "plate-mismatch";
    case ParseErrorKind::unsupported_family: return "unsupported-family";
  }
  return "?";
}

struct ParseError {
  SourceSpan span;
  ParseErrorKind kind = ParseErrorKind::syntax;
  std::string message;
};

inline std::string format(const ParseError& e) {
  return std::to_string(e.span.line) + ":" + std::to_string(e.span.column) + ": " + std::string(to_string(e.kind)) +
         ": " + e.message;
}

struct ParseResult {
  std::optional<ModelIR> model;
  std::vector<ParseError> errors;
  std::vector<std::string> warnings;
  bool ok() const { return model.has_value(); }
};

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) fail(ErrorKind::io, "cannot format number");
  return std::string(buf, end);
}

inline std::optional<double> parse_number(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

namespace detail {

enum class Tok { ident, number, punct, newline, end };

struct Token {
  Tok kind;
  std::string text;
  SourceSpan span;
};

inline std::vector<Token> lex(std::string_view src, std::vector<ParseError>& errors) {
  std::vector<Token> out;
  std::size_t line = 1, col = 1, i = 0;
  int depth = 0;
  auto advance = [&](std::size_t n) {
    i += n;
    col += n;
  };
  while (i < src.size()) {
    const char c = src[i];
    if (c == '#') {
      while (i < src.size() && src[i] != '\n') advance(1);
      continue;
    }
    if (c == '\n') {
      if (depth == 0 && (out.empty() || out.back().kind != Tok::newline)) out.push_back({Tok::newline, "\n", {line, col, 1}});
      ++i;
      ++line;
      col = 1;
      continue;
    }
    if (c == ' ' || c == '\t' || c == '\r') {
      advance(1);
      continue;
    }
    const std::size_t start = i, start_col = col;
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      while (i < src.size() && (std::isalnum(static_cast<unsigned char>(src[i])) || src[i] == '_')) advance(1);
      out.push_back({Tok::ident, std::string(src.substr(start, i - start)), {line, start_col, i - start}});
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || (c == '.' && i + 1 < src.size() && std::isdigit(static_cast<unsigned char>(src[i + 1])))) {
      while (i < src.size() && (std::isdigit(static_cast<unsigned char>(src[i])) || src[i] == '.')) advance(1);
      if (i < src.size() && (src[i] == 'e' || src[i] == 'E')) {
        std::size_t j = i + 1;
        if (j < src.size() && (src[j] == '+' || src[j] == '-')) ++j;
        if (j < src.size() && std::isdigit(static_cast<unsigned char>(src[j]))) {
          advance(j - i);
          while (i < src.size() && std::isdigit(static_cast<unsigned char>(src[i]))) advance(1);
        }
      }
      out.push_back({Tok::number, std::string(src.substr(start, i - start)), {line, start_col, i - start}});
      continue;
    }
    if (std::string_view("[](),:~+-*/").find(c) != std::string_view::npos) {
      if (c == '(' || c == '[') ++depth;
      if ((c == ')' || c == ']') && depth > 0) --depth;
      advance(1);
      out.push_back({Tok::punct, std::string(1, c), {line, start_col, 1}});
      continue;
    }
    // Multi-byte UTF-8 sequences are reported once, spanning the whole character.
    std::size_t len = 1;
    while (i + len < src.size() && (static_cast<unsigned char>(src[i + len]) & 0xC0) == 0x80) ++len;
    errors.push_back({{line, start_col, 1}, ParseErrorKind::syntax, "unexpected character '" + std::string(src.substr(i, len)) + "'"});
    i += len;
    ++col;
  }
  if (out.empty() || out.back().kind != Tok::newline) out.push_back({Tok::newline, "\n", {line, std::max<std::size_t>(col, 1), 1}});
  out.push_back({Tok::end, "", {line, std::max<std::size_t>(col, 1), 1}});
  return out;
}

inline const std::set<std::string, std::less<>>& keywords() {
  static const std::set<std::string, std::less<>> k{"plate", "covariate", "latent", "observe", "proposal", "from",
                                                    "real",  "int",       "exp",    "sigmoid", "gather"};
  return k;
}

struct SyntaxError {
  ParseError error;
};

struct Reference {
  std::string owner;
  std::string name;
  SourceSpan span;
  bool plate = false;
};

class Parser {
 public:
  Parser(std::vector<Token> toks, std::vector<ParseError>& errors) : t_(std::move(toks)), errors_(errors) {}

  ModelIR run() {
    ModelIR m;
    while (peek().kind != Tok::end) {
      if (peek().kind == Tok::newline) {
        ++p_;
        continue;
      }
      try {
        statement(m);
        if (peek().kind != Tok::newline) throw_here("expected end of line, found '" + peek().text + "'");
      } catch (const SyntaxError& e) {
        errors_.push_back(e.error);
        while (peek().kind != Tok::newline && peek().kind != Tok::end) ++p_;
      }
    }
    return m;
  }

  std::map<std::string, SourceSpan> decl_spans;
  std::vector<Reference> refs;
  std::vector<std::pair<std::string, SourceSpan>> duplicates;

 private:
  const Token& peek(std::size_t k = 0) const { return t_[std::min(p_ + k, t_.size() - 1)]; }
  const Token& next() { return t_[std::min(p_++, t_.size() - 1)]; }

  [[noreturn]] void throw_here(const std::string& msg) const {
    auto span = peek().span;
    throw SyntaxError{{span, ParseErrorKind::syntax, msg}};
  }

  bool is(std::string_view text) const { return peek().kind != Tok::end && peek().text == text && peek().kind != Tok::newline; }

  void expect(std::string_view text) {
    if (!is(text)) throw_here("expected '" + std::string(text) + "', found " + describe(peek()));
    ++p_;
  }

  static std::string describe(const Token& t) {
    if (t.kind == Tok::newline) return "end of line";
    if (t.kind == Tok::end) return "end of input";
    return "'" + t.text + "'";
  }

  const Token& ident(std::string_view what) {
    if (peek().kind != Tok::ident || keywords().count(peek().text)) throw_here("expected " + std::string(what) + ", found " + describe(peek()));
    return next();
  }

  void declare(const Token& name) {
    if (decl_spans.count(name.text)) {
      duplicates.emplace_back(name.text, name.span);
      return;
    }
    decl_spans[name.text] = name.span;
  }

  std::vector<std::string> plate_list(const std::string& owner) {
    std::vector<std::string> out;
    if (!is("[")) return out;
    expect("[");
    do {
      const Token& p = ident("plate name");
      out.push_back(p.text);
      refs.push_back({owner, p.text, p.span, true});
    } while (is(",") && (++p_, true));
    expect("]");
    return out;
  }

  Family family() {
    if (peek().kind != Tok::ident) throw_here("expected a family name, found " + describe(peek()));
    const Token& f = next();
    auto fam = family_from_name(f.text);
    if (!fam) throw SyntaxError{{f.span, ParseErrorKind::unsupported_family, "unknown family '" + f.text + "'"}};
    return *fam;
  }

  double signed_number() {
    bool neg = false;
    if (is("-")) {
      neg = true;
      ++p_;
    }
    if (peek().kind != Tok::number) throw_here("expected a number, found " + describe(peek()));
    const Token& n = next();
    auto v = parse_number(n.text);
    if (!v) throw SyntaxError{{n.span, ParseErrorKind::syntax, "malformed number '" + n.text + "'"}};
    return neg ? -*v : *v;
  }

  std::vector<Expr> arguments(const std::string& owner) {
    std::vector<Expr> out;
    expect("(");
    out.push_back(additive(owner));
    while (is(",")) {
      ++p_;
      out.push_back(additive(owner));
    }
    expect(")");
    return out;
  }

  Expr additive(const std::string& owner) {
    Expr e = multiplicative(owner);
    while (is("+") || is("-")) {
      const auto op = next().text == "+" ? Expr::Op::add : Expr::Op::sub;
      e = expr::binary(op, std::move(e), multiplicative(owner));
    }
    return e;
  }

  Expr multiplicative(const std::string& owner) {
    Expr e = unary(owner);
    while (is("*") || is("/")) {
      const auto op = next().text == "*" ? Expr::Op::mul : Expr::Op::div;
      e = expr::binary(op, std::move(e), unary(owner));
    }
    return e;
  }

  Expr unary(const std::string& owner) {
    if (is("-")) {
      ++p_;
      if (peek().kind == Tok::number) {
        const Token& n = next();
        auto v = parse_number(n.text);
        if (!v) throw SyntaxError{{n.span, ParseErrorKind::syntax, "malformed number '" + n.text + "'"}};
        return expr::num(-*v);
      }
      return expr::unary(Expr::Op::neg, unary(owner));
    }
    return primary(owner);
  }

  Expr primary(const std::string& owner) {
    const Token& t = peek();
    if (t.kind == Tok::number) {
      ++p_;
      auto v = parse_number(t.text);
      if (!v) throw SyntaxError{{t.span, ParseErrorKind::syntax, "malformed number '" + t.text + "'"}};
      return expr::num(*v);
    }
    if (is("(")) {
      ++p_;
      Expr e = additive(owner);
      expect(")");
      return e;
    }
    if (t.kind == Tok::ident && (t.text == "exp" || t.text == "sigmoid")) {
      ++p_;
      const auto op = t.text == "exp" ? Expr::Op::exp : Expr::Op::sigmoid;
      expect("(");
      Expr a = additive(owner);
      expect(")");
      return expr::unary(op, std::move(a));
    }
    if (t.kind == Tok::ident && t.text == "gather") {
      ++p_;
      expect("(");
      const Token& table = ident("a table name");
      refs.push_back({owner, table.text, table.span});
      expect(",");
      const Token& index = ident("an index covariate");
      refs.push_back({owner, index.text, index.span});
      expect(")");
      return expr::gather(table.text, index.text);
    }
    if (t.kind == Tok::ident && !keywords().count(t.text)) {
      ++p_;
      refs.push_back({owner, t.text, t.span});
      return expr::ref(t.text);
    }
    throw_here("expected an expression, found " + describe(t));
  }

  void statement(ModelIR& m) {
    const Token& kw = peek();
    if (kw.kind != Tok::ident) throw_here("expected a statement, found " + describe(kw));
    if (kw.text == "plate") {
      ++p_;
      const Token& name = ident("a plate name");
      expect("[");
      if (peek().kind != Tok::number) throw_here("expected a plate size, found " + describe(peek()));
      const Token& size = next();
      auto v = parse_number(size.text);
      if (!v || *v < 1 || *v != std::floor(*v) || *v > 1e12) {
        throw SyntaxError{{size.span, ParseErrorKind::syntax, "plate size must be a positive integer"}};
      }
      expect("]");
      declare(name);
      m.plates.push_back({name.text, static_cast<std::size_t>(*v)});
    } else if (kw.text == "covariate") {
      ++p_;
      const Token& name = ident("a covariate name");
      auto plates = plate_list(name.text);
      expect(":");
      CovariateType type;
      if (is("real")) type = CovariateType::real;
      else if (is("int")) type = CovariateType::integer;
      else throw_here("expected 'real' or 'int', found " + describe(peek()));
      ++p_;
      declare(name);
      m.covariates.push_back({name.text, plates, type});
    } else if (kw.text == "latent") {
      ++p_;
      const Token& name = ident("a latent name");
      LatentDecl l;
      l.name = name.text;
      l.plates = plate_list(name.text);
      expect("~");
      l.prior_family = family();
      l.prior_params = arguments(name.text);
      l.proposal_family = l.prior_family;
      if (is("proposal")) {
        ++p_;
        const SourceSpan fspan = peek().span;
        l.proposal_family = family();
        if (!is_proposal_family(l.proposal_family)) {
          throw SyntaxError{{fspan, ParseErrorKind::unsupported_family,
                             std::string(family_name(l.proposal_family)) + " cannot be used as a proposal"}};
        }
        const SourceSpan open = peek().span;
        expect("(");
        std::vector<double> nums{signed_number()};
        while (is(",")) {
          ++p_;
          nums.push_back(signed_number());
        }
        expect(")");
        if (nums.size() != stat_count(l.proposal_family)) {
          throw SyntaxError{{open, ParseErrorKind::syntax,
                             std::string(family_name(l.proposal_family)) + " proposal takes " +
                                 std::to_string(stat_count(l.proposal_family)) + " mean parameters, got " +
                                 std::to_string(nums.size())}};
        }
        l.proposal_init = MeanParams{l.proposal_family, {nums[0], nums.size() > 1 ? nums[1] : 0.0}};
      } else {
        l.proposal_init = default_proposal(l.prior_family);
      }
      declare(name);
      m.latents.push_back(std::move(l));
    } else if (kw.text == "observe") {
      ++p_;
      const Token& name = ident("an observation name");
      ObservationDecl o;
      o.name = name.text;
      o.plates = plate_list(name.text);
      expect("~");
      o.family = family();
      o.params = arguments(name.text);
      expect("from");
      o.data = ident("a data column").text;
      declare(name);
      m.observations.push_back(std::move(o));
    } else {
      throw_here("unknown statement '" + kw.text + "'");
    }
  }

 public:
  static MeanParams default_proposal(Family f) {
    switch (f) {
      case Family::bernoulli: return {f, {0.5, 0.0}};
      case Family::beta: return {f, {-1.0, -1.0}};          // Beta(1, 1)
      case Family::gamma: return {f, {1.0, -0.57721566490153286}};  // Gamma(1, 1)
      default: return {Family::gaussian, {0.0, 1.0}};
    }
  }

 private:
  std::vector<Token> t_;
  std::size_t p_ = 0;
  std::vector<ParseError>& errors_;
};

}  // namespace detail

/// Parses model source. Never throws; all problems come back as errors with spans.
inline ParseResult parse(std::string_view source) {
  ParseResult out;
  detail::Parser parser(detail::lex(source, out.errors), out.errors);
  ModelIR m = parser.run();

  for (const auto& [name, span] : parser.duplicates) {
    out.errors.push_back({span, ParseErrorKind::duplicate_name, "'" + name + "' is already declared"});
  }
  for (const auto& r : parser.refs) {
    const bool known = r.plate ? m.plate_index(r.name).has_value() : m.plates_of(r.name).has_value();
    if (!known) {
      out.errors.push_back({r.span, ParseErrorKind::unknown_identifier,
                            std::string(r.plate ? "unknown plate '" : "unknown name '") + r.name + "' in '" + r.owner + "'"});
    }
  }
  if (out.errors.empty()) {
    const auto report = validate(m);
    for (const auto& issue : report.errors) {
      ParseErrorKind kind = ParseErrorKind::syntax;
      switch (issue.kind) {
        case IssueKind::cycle: kind = ParseErrorKind::cycle; break;
        case IssueKind::plate_mismatch: kind = ParseErrorKind::plate_mismatch; break;
        case IssueKind::unsupported_family: kind = ParseErrorKind::unsupported_family; break;
        case IssueKind::unresolved_name: kind = ParseErrorKind::unknown_identifier; break;
        case IssueKind::duplicate_name: kind = ParseErrorKind::duplicate_name; break;
        default: break;
      }
      auto it = parser.decl_spans.find(issue.subject);
      const SourceSpan span = it != parser.decl_spans.end() ? it->second : SourceSpan{};
      out.errors.push_back({span, kind, issue.message});
    }
    for (const auto& w : report.warnings) out.warnings.push_back(w.message);
  }
  std::stable_sort(out.errors.begin(), out.errors.end(), [](const ParseError& a, const ParseError& b) {
    return std::tie(a.span.line, a.span.column) < std::tie(b.span.line, b.span.column);
  });
  if (out.errors.empty()) out.model = std::move(m);
  return out;
}

inline ModelIR parse_or_throw(std::string_view source) {
  auto r = parse(source);
  if (!r.ok()) {
    std::string msg;
    for (const auto& e : r.errors) msg += format(e) + "\n";
    fail(ErrorKind::validation, msg);
  }
  return *r.model;
}

// ---------------------------------------------------------------------------
// Printing

namespace detail {

inline int precedence(const Expr& e) {
  switch (e.op) {
    case Expr::Op::add:
    case Expr::Op::sub: return 1;
    case Expr::Op::mul:
    case Expr::Op::div: return 2;
    case Expr::Op::neg: return 3;
    case Expr::Op::constant: return e.value < 0 || std::signbit(e.value) ? 3 : 4;
    default: return 4;
  }
}

inline std::string print_expr(const Expr& e) {
  using Op = Expr::Op;
  auto wrap = [](const Expr& child, bool paren) { return paren ? "(" + print_expr(child) + ")" : print_expr(child); };
  switch (e.op) {
    case Op::constant: return format_number(e.value);
    case Op::ref: return e.name;
    case Op::gather: return "gather(" + e.name + ", " + e.index + ")";
    case Op::exp: return "exp(" + print_expr(e.args[0]) + ")";
    case Op::sigmoid: return "sigmoid(" + print_expr(e.args[0]) + ")";
    case Op::neg: {
      const Expr& a = e.args[0];
      // A bare number after '-' would be folded into a negative literal.
      const bool paren = precedence(a) < 3 || a.op == Op::constant;
      return "-" + wrap(a, paren);
    }
    default: {
      const int p = precedence(e);
      const char* sym = e.op == Op::add ? " + " : e.op == Op::sub ? " - " : e.op == Op::mul ? " * " : " / ";
      return wrap(e.args[0], precedence(e.args[0]) < p) + sym + wrap(e.args[1], precedence(e.args[1]) <= p);
    }
  }
}

inline std::string print_plates(const std::vector<std::string>& plates) {
  if (plates.empty()) return "";
  return "[" + qem::detail::join(plates) + "]";
}

inline std::string print_args(const std::vector<Expr>& args) {
  std::string out = "(";
  for (std::size_t i = 0; i < args.size(); ++i) out += (i ? ", " : "") + print_expr(args[i]);
  return out + ")";
}

}  // namespace detail

inline std::string pretty_print(const ModelIR& m) {
  std::ostringstream os;
  for (const auto& p : m.plates) os << "plate " << p.name << "[" << p.size << "]\n";
  for (const auto& c : m.covariates)
    os << "covariate " << c.name << detail::print_plates(c.plates) << " : "
       << (c.type == CovariateType::integer ? "int" : "real") << "\n";
  for (const auto& l : m.latents) {
    os << "latent " << l.name << detail::print_plates(l.plates) << " ~ " << family_name(l.prior_family)
       << detail::print_args(l.prior_params) << " proposal " << family_name(l.proposal_family) << "(";
    for (std::size_t i = 0; i < stat_count(l.proposal_family); ++i)
      os << (i ? ", " : "") << format_number(l.proposal_init.m[i]);
    os << ")\n";
  }
  for (const auto& o : m.observations)
    os << "observe " << o.name << detail::print_plates(o.plates) << " ~ " << family_name(o.family)
       << detail::print_args(o.params) << " from " << o.data << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Datasets

struct CsvTable {
  std::string path;
  std::vector<std::string> header;
  std::vector<std::vector<double>> columns;
};

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? "" : s.substr(b, e - b + 1);
  }
  return out;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open '" + path.string() + "'");
  CsvTable t;
  t.path = path.string();
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::schema, "'" + path.string() + "' has no header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  t.header = split_csv_line(line);
  t.columns.resize(t.header.size());
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != t.header.size()) {
      fail(ErrorKind::schema, "'" + path.string() + "' line " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                                  " fields, header has " + std::to_string(t.header.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      auto v = parse_number(cells[c]);
      if (!v) {
        fail(ErrorKind::schema, "'" + path.string() + "' line " + std::to_string(row) + " column '" + t.header[c] +
                                    "': not a number '" + cells[c] + "'");
      }
      t.columns[c].push_back(*v);
    }
  }
  return t;
}

/// Loads every binding the model declares from a CSV file or a directory of CSV files.
/// Extra columns are ignored.
inline Dataset load_dataset(const std::filesystem::path& path, const ModelIR& m, bool require_all = true) {
  std::vector<CsvTable> tables;
  std::error_code ec;
  if (std::filesystem::is_directory(path, ec)) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(path))
      if (entry.path().extension() == ".csv") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) tables.push_back(read_csv(f));
  } else if (std::filesystem::exists(path, ec)) {
    tables.push_back(read_csv(path));
  } else {
    fail(ErrorKind::io, "dataset '" + path.string() + "' does not exist");
  }

  Dataset out;
  auto bind = [&](const std::string& column, const std::vector<std::string>& plates, std::optional<Family> family,
                  bool integer) {
    const std::vector<double>* values = nullptr;
    std::string where;
    for (const auto& t : tables)
      for (std::size_t c = 0; c < t.header.size() && !values; ++c)
        if (t.header[c] == column) {
          values = &t.columns[c];
          where = t.path;
        }
    if (!values) {
      if (require_all) fail(ErrorKind::schema, "missing column '" + column + "' in '" + path.string() + "'");
      return;
    }
    const std::size_t want = m.cell_count(plates);
    if (values->size() != want) {
      fail(ErrorKind::schema, "column '" + column + "' in '" + where + "' has " + std::to_string(values->size()) +
                                  " rows, expected " + std::to_string(want) + " for plates [" + qem::detail::join(plates) + "]");
    }
    for (std::size_t r = 0; r < values->size(); ++r) {
      const double v = (*values)[r];
      const bool bad = family ? !in_support(*family, v) : (integer && v != std::floor(v));
      if (bad) {
        fail(ErrorKind::domain, "column '" + column + "' row " + std::to_string(r + 1) + ": value " + format_number(v) +
                                    " is outside the support of " +
                                    (family ? std::string(family_name(*family)) : std::string("int")));
      }
    }
    out[column] = plate_tensor(m, plates, *values);
  };
  for (const auto& c : m.covariates) bind(c.name, c.plates, std::nullopt, c.type == CovariateType::integer);
  for (const auto& o : m.observations) bind(o.data, o.plates, o.family, false);
  return out;
}

/// Writes bindings as CSV files grouped by plate list, one file per group, into `dir`.
inline void write_dataset(const std::filesystem::path& dir, const ModelIR& m, const Dataset& data) {
  std::filesystem::create_directories(dir);
  std::map<std::vector<std::string>, std::vector<std::string>> groups;
  auto plates_for = [&](const std::string& column) -> std::optional<std::vector<std::string>> {
    if (auto i = m.covariate_index(column)) return m.covariates[*i].plates;
    for (const auto& o : m.observations)
      if (o.data == column) return o.plates;
    return std::nullopt;
  };
  for (const auto& [column, t] : data) {
    auto plates = plates_for(column);
    if (!plates) fail(ErrorKind::schema, "column '" + column + "' is not a binding of the model");
    groups[*plates].push_back(column);
  }
  for (const auto& [plates, columns] : groups) {
    std::string stem = plates.empty() ? "scalars" : qem::detail::join(plates, "_");
    std::ofstream out(dir / (stem + ".csv"), std::ios::binary);
    if (!out) fail(ErrorKind::io, "cannot write to '" + dir.string() + "'");
    std::vector<std::vector<double>> cols;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      out << (c ? "," : "") << columns[c];
      cols.push_back(plate_values(m, plates, data.at(columns[c])));
    }
    out << "\n";
    for (std::size_t r = 0; r < cols.front().size(); ++r) {
      for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << format_number(cols[c][r]);
      out << "\n";
    }
  }
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace qem::dsl
