// SPDX-License-Identifier: Apache-2.0
//
// The small expression language behind code_executor. It reads like a
// Python/numpy subset: literals, arithmetic with elementwise broadcasting over
// lists, comparisons, boolean operators, indexing (including a[i, j]), a fixed
// set of math functions, assignment and print. There are no loops, no
// attribute access beyond "math.f" / "np.f" spellings, and no I/O.
#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "toolshed/image.hpp"
#include "toolshed/value.hpp"

namespace toolshed::interp {

inline constexpr std::size_t kDefaultStepBudget = 1'000'000;
inline constexpr std::size_t kMaxCodeBytes = 64 * 1024;

class InterpError : public Error {
 public:
  using Error::Error;
};

struct Outcome {
  std::optional<Value> result;
  std::string out;
  std::string err;
  ValueMap assigned;
};

/// Shortest round-trip decimal; integral values print without a fraction.
inline std::string format_number(double d) {
  if (std::isnan(d)) return "nan";
  if (std::isinf(d)) return d > 0 ? "inf" : "-inf";
  if (d == std::floor(d) && std::abs(d) < 1e15) return std::to_string(static_cast<long long>(d));
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, d);
  return std::string(buf, r.ptr);
}

inline std::string format_value(const Value& v) {
  const auto& s = v.storage();
  if (v.is_null()) return "None";
  if (v.is_bool()) return v.as_bool() ? "True" : "False";
  if (v.is_number()) return format_number(v.as_number());
  if (v.is_string()) return v.as_string();
  if (v.is_point()) return "(" + format_number(v.as_point().x) + ", " + format_number(v.as_point().y) + ")";
  if (v.is_list()) {
    std::string out = "[";
    const auto& l = v.as_list();
    for (std::size_t i = 0; i < l.size(); ++i) out += (i ? ", " : "") + format_value(l[i]);
    return out + "]";
  }
  if (v.is_attachment()) {
    const auto& a = *v.as_attachment();
    return "<" + std::string(to_string(a.media)) + " " + a.name + " " + std::to_string(a.width) + "x" +
           std::to_string(a.height) + ">";
  }
  (void)s;
  return "$" + v.as_ref().name;
}

namespace detail {

enum class Tok { Num, Str, Name, Op, Newline, End };

struct Token {
  Tok kind;
  std::string text;
  double num = 0;
  std::size_t pos = 0;
};

inline std::vector<Token> tokenize(std::string_view src) {
  std::vector<Token> out;
  int depth = 0;
  std::size_t i = 0;
  auto is_name = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; };
  while (i < src.size()) {
    const char c = src[i];
    if (c == '#') {
      while (i < src.size() && src[i] != '\n') ++i;
      continue;
    }
    if (c == '\n' || c == ';') {
      if (depth == 0) out.push_back({Tok::Newline, ";", 0, i});
      ++i;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c)) || c == '\\') {
      ++i;
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || (c == '.' && i + 1 < src.size() && std::isdigit(static_cast<unsigned char>(src[i + 1])))) {
      std::size_t j = i;
      while (j < src.size() && (std::isdigit(static_cast<unsigned char>(src[j])) || src[j] == '.')) ++j;
      if (j < src.size() && (src[j] == 'e' || src[j] == 'E')) {
        std::size_t k = j + 1;
        if (k < src.size() && (src[k] == '+' || src[k] == '-')) ++k;
        if (k < src.size() && std::isdigit(static_cast<unsigned char>(src[k]))) {
          j = k;
          while (j < src.size() && std::isdigit(static_cast<unsigned char>(src[j]))) ++j;
        }
      }
      const std::string text(src.substr(i, j - i));
      double v = 0;
      auto r = std::from_chars(text.data(), text.data() + text.size(), v);
      if (r.ec != std::errc() || r.ptr != text.data() + text.size())
        throw InterpError("bad number '" + text + "' at " + std::to_string(i));
      out.push_back({Tok::Num, text, v, i});
      i = j;
      continue;
    }
    if (is_name(c)) {
      std::size_t j = i;
      while (j < src.size() && is_name(src[j])) ++j;
      out.push_back({Tok::Name, std::string(src.substr(i, j - i)), 0, i});
      i = j;
      continue;
    }
    if (c == '"' || c == '\'') {
      std::string s;
      std::size_t j = i + 1;
      while (j < src.size() && src[j] != c) {
        if (src[j] == '\\' && j + 1 < src.size()) {
          const char e = src[++j];
          s.push_back(e == 'n' ? '\n' : e == 't' ? '\t' : e);
        } else {
          s.push_back(src[j]);
        }
        ++j;
      }
      if (j >= src.size()) throw InterpError("unterminated string at " + std::to_string(i));
      out.push_back({Tok::Str, s, 0, i});
      i = j + 1;
      continue;
    }
    static const char* two[] = {"**", "//", "==", "!=", "<=", ">="};
    std::string op(1, c);
    for (const char* t : two)
      if (src.substr(i, 2) == t) op = t;
    if (op.size() == 1 && std::string_view("+-*/%<>=()[],.").find(c) == std::string_view::npos)
      throw InterpError(std::string("unexpected character '") + c + "' at " + std::to_string(i));
    if (op == "(" || op == "[") ++depth;
    if (op == ")" || op == "]") depth = std::max(0, depth - 1);
    out.push_back({Tok::Op, op, 0, i});
    i += op.size();
  }
  out.push_back({Tok::End, "", 0, src.size()});
  return out;
}

struct Node;
using NodePtr = std::unique_ptr<Node>;

enum class Kind { Num, Str, Const, Name, List, Unary, Binary, Not, And, Or, Compare, Index, Call, Assign, Import };

struct Node {
  Kind kind;
  std::string text;  // name, operator or string literal
  double num = 0;
  Value constant;
  std::vector<NodePtr> kids;
  std::size_t pos = 0;
};

inline NodePtr make(Kind k, std::string text, std::size_t pos) {
  auto n = std::make_unique<Node>();
  n->kind = k;
  n->text = std::move(text);
  n->pos = pos;
  return n;
}

class Parser {
 public:
  explicit Parser(std::vector<Token> t) : t_(std::move(t)) {}

  std::vector<NodePtr> program() {
    std::vector<NodePtr> out;
    skip_newlines();
    while (peek().kind != Tok::End) {
      out.push_back(statement());
      if (peek().kind != Tok::End && peek().kind != Tok::Newline) fail("expected end of statement");
      skip_newlines();
    }
    return out;
  }

  NodePtr single_expression() {
    skip_newlines();
    auto e = expr();
    skip_newlines();
    if (peek().kind != Tok::End) fail("eval accepts a single expression");
    return e;
  }

 private:
  const Token& peek(std::size_t k = 0) const { return t_[std::min(i_ + k, t_.size() - 1)]; }
  const Token& next() { return t_[std::min(i_++, t_.size() - 1)]; }
  bool is_op(std::string_view s, std::size_t k = 0) const { return peek(k).kind == Tok::Op && peek(k).text == s; }
  bool is_word(std::string_view s) const { return peek().kind == Tok::Name && peek().text == s; }
  void expect(std::string_view s) {
    if (!is_op(s)) fail("expected '" + std::string(s) + "'");
    ++i_;
  }
  [[noreturn]] void fail(const std::string& why) const {
    throw InterpError("syntax error at " + std::to_string(peek().pos) + ": " + why);
  }
  void skip_newlines() {
    while (peek().kind == Tok::Newline) ++i_;
  }

  NodePtr statement() {
    if (is_word("import") || is_word("from")) {
      auto n = make(Kind::Import, "", peek().pos);
      while (peek().kind != Tok::Newline && peek().kind != Tok::End) ++i_;
      return n;
    }
    if (peek().kind == Tok::Name && is_op("=", 1)) {
      auto n = make(Kind::Assign, peek().text, peek().pos);
      i_ += 2;
      n->kids.push_back(expr());
      return n;
    }
    return expr();
  }

  NodePtr expr() { return or_expr(); }

  NodePtr or_expr() {
    auto l = and_expr();
    while (is_word("or")) {
      auto n = make(Kind::Or, "or", next().pos);
      n->kids.push_back(std::move(l));
      n->kids.push_back(and_expr());
      l = std::move(n);
    }
    return l;
  }

  NodePtr and_expr() {
    auto l = not_expr();
    while (is_word("and")) {
      auto n = make(Kind::And, "and", next().pos);
      n->kids.push_back(std::move(l));
      n->kids.push_back(not_expr());
      l = std::move(n);
    }
    return l;
  }

  NodePtr not_expr() {
    if (is_word("not")) {
      auto n = make(Kind::Not, "not", next().pos);
      n->kids.push_back(not_expr());
      return n;
    }
    return compare();
  }

  NodePtr compare() {
    auto l = arith();
    for (const char* op : {"<", "<=", ">", ">=", "==", "!="}) {
      if (is_op(op)) {
        auto n = make(Kind::Compare, op, next().pos);
        n->kids.push_back(std::move(l));
        n->kids.push_back(arith());
        return n;
      }
    }
    return l;
  }

  NodePtr arith() {
    auto l = term();
    while (is_op("+") || is_op("-")) {
      auto n = make(Kind::Binary, next().text, peek().pos);
      n->kids.push_back(std::move(l));
      n->kids.push_back(term());
      l = std::move(n);
    }
    return l;
  }

  NodePtr term() {
    auto l = unary();
    while (is_op("*") || is_op("/") || is_op("//") || is_op("%")) {
      auto n = make(Kind::Binary, next().text, peek().pos);
      n->kids.push_back(std::move(l));
      n->kids.push_back(unary());
      l = std::move(n);
    }
    return l;
  }

  NodePtr unary() {
    if (is_op("-") || is_op("+")) {
      auto n = make(Kind::Unary, next().text, peek().pos);
      n->kids.push_back(unary());
      return n;
    }
    return power();
  }

  NodePtr power() {
    auto base = postfix();
    if (is_op("**")) {
      auto n = make(Kind::Binary, "**", next().pos);
      n->kids.push_back(std::move(base));
      n->kids.push_back(unary());
      return n;
    }
    return base;
  }

  NodePtr postfix() {
    auto e = atom();
    while (true) {
      if (is_op("[")) {
        const auto pos = next().pos;
        std::vector<NodePtr> idx;
        idx.push_back(expr());
        while (is_op(",")) {
          ++i_;
          idx.push_back(expr());
        }
        expect("]");
        for (auto& k : idx) {
          auto n = make(Kind::Index, "", pos);
          n->kids.push_back(std::move(e));
          n->kids.push_back(std::move(k));
          e = std::move(n);
        }
      } else if (is_op("(")) {
        if (e->kind != Kind::Name) fail("only named functions can be called");
        const auto pos = next().pos;
        auto n = make(Kind::Call, e->text, pos);
        if (!is_op(")")) {
          n->kids.push_back(expr());
          while (is_op(",")) {
            ++i_;
            if (is_op(")")) break;
            n->kids.push_back(expr());
          }
        }
        expect(")");
        e = std::move(n);
      } else {
        return e;
      }
    }
  }

  NodePtr atom() {
    const Token& t = next();
    switch (t.kind) {
      case Tok::Num: {
        auto n = make(Kind::Num, t.text, t.pos);
        n->num = t.num;
        return n;
      }
      case Tok::Str: return make(Kind::Str, t.text, t.pos);
      case Tok::Name: {
        if (t.text == "True" || t.text == "False" || t.text == "None") {
          auto n = make(Kind::Const, t.text, t.pos);
          n->constant = t.text == "None" ? Value() : Value(t.text == "True");
          return n;
        }
        std::string name = t.text;
        // math.sqrt, np.mean, numpy.linalg.norm -> the bare function name.
        while (is_op(".") && peek(1).kind == Tok::Name) {
          ++i_;
          name = next().text;
        }
        return make(Kind::Name, name, t.pos);
      }
      case Tok::Op:
        if (t.text == "(") {
          auto e = expr();
          if (is_op(",")) {  // tuple literal behaves as a list
            auto n = make(Kind::List, "", t.pos);
            n->kids.push_back(std::move(e));
            while (is_op(",")) {
              ++i_;
              if (is_op(")")) break;
              n->kids.push_back(expr());
            }
            expect(")");
            return n;
          }
          expect(")");
          return e;
        }
        if (t.text == "[") {
          auto n = make(Kind::List, "", t.pos);
          if (!is_op("]")) {
            n->kids.push_back(expr());
            while (is_op(",")) {
              ++i_;
              if (is_op("]")) break;
              n->kids.push_back(expr());
            }
          }
          expect("]");
          return n;
        }
        break;
      default: break;
    }
    --i_;
    fail(t.kind == Tok::End ? "unexpected end of input" : "unexpected '" + t.text + "'");
  }

  std::vector<Token> t_;
  std::size_t i_ = 0;
};

class Machine {
 public:
  Machine(const ValueMap& env, std::size_t budget) : env_(env), budget_(budget) {}

  Value eval(const Node& n) {
    tick();
    switch (n.kind) {
      case Kind::Num: return n.num;
      case Kind::Str: return n.text;
      case Kind::Const: return n.constant;
      case Kind::Name: return lookup(n.text);
      case Kind::List: {
        Value::List l;
        for (const auto& k : n.kids) l.push_back(eval(*k));
        return l;
      }
      case Kind::Unary: {
        Value v = eval(*n.kids[0]);
        return n.text == "-" ? map1(v, [](double x) { return -x; }) : map1(v, [](double x) { return x; });
      }
      case Kind::Binary: return binary(n.text, eval(*n.kids[0]), eval(*n.kids[1]));
      case Kind::Not: return !truthy(eval(*n.kids[0]));
      case Kind::And: {
        Value l = eval(*n.kids[0]);
        return truthy(l) ? eval(*n.kids[1]) : l;
      }
      case Kind::Or: {
        Value l = eval(*n.kids[0]);
        return truthy(l) ? l : eval(*n.kids[1]);
      }
      case Kind::Compare: return compare(n.text, eval(*n.kids[0]), eval(*n.kids[1]));
      case Kind::Index: return index(eval(*n.kids[0]), eval(*n.kids[1]));
      case Kind::Call: return call(n);
      case Kind::Assign: {
        Value v = eval(*n.kids[0]);
        locals_[n.text] = v;
        assigned_[n.text] = v;
        return Value();
      }
      case Kind::Import: return Value();
    }
    return Value();
  }

  std::string out;
  const ValueMap& assigned() const { return assigned_; }

 private:
  void tick(std::size_t n = 1) {
    steps_ += n;
    if (steps_ > budget_) throw InterpError("step budget of " + std::to_string(budget_) + " exceeded");
  }

  Value lookup(const std::string& name) {
    if (auto it = locals_.find(name); it != locals_.end()) return it->second;
    if (auto it = env_.find(name); it != env_.end()) return normalize(it->second);
    if (name == "pi") return std::numbers::pi;
    if (name == "e") return std::numbers::e;
    if (name == "inf") return std::numeric_limits<double>::infinity();
    throw InterpError("name '" + name + "' is not defined");
  }

  static Value normalize(const Value& v) {
    if (v.is_point()) return Value::List{v.as_point().x, v.as_point().y};
    if (v.is_list()) {
      Value::List l;
      for (const auto& e : v.as_list()) l.push_back(normalize(e));
      return l;
    }
    return v;
  }

  static bool truthy(const Value& v) {
    if (v.is_null()) return false;
    if (v.is_bool()) return v.as_bool();
    if (v.is_number()) return v.as_number() != 0;
    if (v.is_string()) return !v.as_string().empty();
    if (v.is_list()) return !v.as_list().empty();
    return true;
  }

  double num(const Value& v, const char* what) {
    if (v.is_number()) return v.as_number();
    if (v.is_bool()) return v.as_bool() ? 1 : 0;
    throw InterpError(std::string(what) + ": expected a number, got " + type_name(v));
  }

  static std::string type_name(const Value& v) {
    if (v.is_null()) return "None";
    if (v.is_bool()) return "bool";
    if (v.is_number()) return "number";
    if (v.is_string()) return "str";
    if (v.is_list()) return "list";
    if (v.is_attachment()) return std::string(to_string(v.as_attachment()->media));
    return "value";
  }

  template <class F>
  Value map1(const Value& v, F f) {
    if (v.is_list()) {
      Value::List l;
      l.reserve(v.as_list().size());
      for (const auto& e : v.as_list()) l.push_back(map1(e, f));
      tick(v.as_list().size());
      return l;
    }
    return f(num(v, "operand"));
  }

  template <class F>
  Value map2(const Value& a, const Value& b, F f) {
    if (a.is_list() && b.is_list()) {
      const auto& la = a.as_list();
      const auto& lb = b.as_list();
      if (la.size() != lb.size())
        throw InterpError("operands could not be broadcast together (" + std::to_string(la.size()) + " vs " +
                          std::to_string(lb.size()) + ")");
      Value::List l;
      for (std::size_t i = 0; i < la.size(); ++i) l.push_back(map2(la[i], lb[i], f));
      tick(la.size());
      return l;
    }
    if (a.is_list()) {
      Value::List l;
      for (const auto& e : a.as_list()) l.push_back(map2(e, b, f));
      tick(a.as_list().size());
      return l;
    }
    if (b.is_list()) {
      Value::List l;
      for (const auto& e : b.as_list()) l.push_back(map2(a, e, f));
      tick(b.as_list().size());
      return l;
    }
    return f(num(a, "left operand"), num(b, "right operand"));
  }

  Value binary(const std::string& op, const Value& a, const Value& b) {
    if (op == "+" && a.is_string() && b.is_string()) return a.as_string() + b.as_string();
    if (op == "+") return map2(a, b, [](double x, double y) { return x + y; });
    if (op == "-") return map2(a, b, [](double x, double y) { return x - y; });
    if (op == "*") return map2(a, b, [](double x, double y) { return x * y; });
    if (op == "**") return map2(a, b, [](double x, double y) { return std::pow(x, y); });
    if (op == "/" || op == "//" || op == "%") {
      return map2(a, b, [&](double x, double y) -> double {
        if (y == 0) throw InterpError("division by zero");
        if (op == "/") return x / y;
        if (op == "//") return std::floor(x / y);
        return x - y * std::floor(x / y);
      });
    }
    throw InterpError("unknown operator " + op);
  }

  Value compare(const std::string& op, const Value& a, const Value& b) {
    if (op == "==") return a == b || (a.is_number() && b.is_bool() && a.as_number() == (b.as_bool() ? 1 : 0));
    if (op == "!=") return !(a == b);
    if (a.is_list() || b.is_list())
      return map2(a, b, [&](double x, double y) { return compare_num(op, x, y) ? 1.0 : 0.0; });
    return compare_num(op, num(a, op.c_str()), num(b, op.c_str()));
  }

  static bool compare_num(const std::string& op, double x, double y) {
    if (op == "<") return x < y;
    if (op == "<=") return x <= y;
    if (op == ">") return x > y;
    return x >= y;
  }

  static std::size_t wrap(double i, std::size_t n) {
    if (i != std::floor(i)) throw InterpError("indices must be integers");
    const long long k = static_cast<long long>(i) < 0 ? static_cast<long long>(i) + static_cast<long long>(n) : static_cast<long long>(i);
    if (k < 0 || static_cast<std::size_t>(k) >= n) throw InterpError("index out of range");
    return static_cast<std::size_t>(k);
  }

  Value index(const Value& c, const Value& iv) {
    const double i = num(iv, "index");
    if (c.is_list()) return c.as_list()[wrap(i, c.as_list().size())];
    if (c.is_string()) return std::string(1, c.as_string()[wrap(i, c.as_string().size())]);
    if (c.is_attachment()) return attachment_row(*c.as_attachment(), i);
    throw InterpError(type_name(c) + " is not indexable");
  }

  // Rows of grids, masks and images; points of a point cloud.
  Value attachment_row(const Attachment& a, double i) {
    Value::List row;
    switch (a.media) {
      case Media::Float32Grid: {
        const auto r = wrap(i, a.height);
        tick(a.width);
        for (std::uint32_t x = 0; x < a.width; ++x) row.push_back(double(get_f32(a.bytes.data() + 4 * (r * a.width + x))));
        return row;
      }
      case Media::BoolMaskRLE: {
        const auto r = wrap(i, a.height);
        auto g = mask_from_attachment(a);
        tick(g.cells.size());
        for (std::uint32_t x = 0; x < a.width; ++x) row.push_back(g.at(x, static_cast<std::uint32_t>(r)));
        return row;
      }
      case Media::RasterImage: {
        const auto r = wrap(i, a.height);
        tick(a.width);
        for (std::uint32_t x = 0; x < a.width; ++x) {
          const auto* p = a.bytes.data() + 3 * (r * a.width + x);
          row.push_back(Value::List{double(p[0]), double(p[1]), double(p[2])});
        }
        return row;
      }
      case Media::Float32PointsN3: {
        const auto k = wrap(i, a.bytes.size() / 12);
        const auto* p = a.bytes.data() + 12 * k;
        return Value::List{double(get_f32(p)), double(get_f32(p + 4)), double(get_f32(p + 8))};
      }
      case Media::Opaque: break;
    }
    throw InterpError("attachment " + a.name + " is not indexable");
  }

  std::size_t length(const Value& v) {
    if (v.is_list()) return v.as_list().size();
    if (v.is_string()) return v.as_string().size();
    if (v.is_attachment()) {
      const auto& a = *v.as_attachment();
      return a.media == Media::Float32PointsN3 ? a.bytes.size() / 12 : a.height;
    }
    throw InterpError("object of type " + type_name(v) + " has no len()");
  }

  void flatten(const Value& v, std::vector<double>& out) {
    tick();
    if (v.is_list()) {
      for (const auto& e : v.as_list()) flatten(e, out);
      return;
    }
    out.push_back(num(v, "reduction"));
  }

  std::vector<double> reduce_args(const std::string& f, const std::vector<Value>& args) {
    if (args.empty()) throw InterpError(f + "() needs at least one argument");
    std::vector<double> xs;
    for (const auto& a : args) flatten(a, xs);
    if (xs.empty()) throw InterpError(f + "() of an empty sequence");
    return xs;
  }

  Value call(const Node& n) {
    const std::string& f = n.text;
    std::vector<Value> args;
    for (const auto& k : n.kids) args.push_back(eval(*k));
    auto arity = [&](std::size_t k) {
      if (args.size() != k) throw InterpError(f + "() takes " + std::to_string(k) + " argument(s)");
    };
    using D = double;
    static const std::map<std::string, D (*)(D)> unary{
        {"sqrt", [](D x) { return std::sqrt(x); }}, {"exp", [](D x) { return std::exp(x); }},
        {"log", [](D x) { return std::log(x); }},   {"sin", [](D x) { return std::sin(x); }},
        {"cos", [](D x) { return std::cos(x); }},   {"tan", [](D x) { return std::tan(x); }},
        {"abs", [](D x) { return std::abs(x); }},   {"fabs", [](D x) { return std::abs(x); }},
        {"floor", [](D x) { return std::floor(x); }}, {"ceil", [](D x) { return std::ceil(x); }},
        {"degrees", [](D x) { return x * 180 / std::numbers::pi; }},
        {"radians", [](D x) { return x * std::numbers::pi / 180; }}};
    if (auto it = unary.find(f); it != unary.end()) {
      arity(1);
      return map1(args[0], it->second);
    }
    if (f == "atan2" || f == "arctan2") {
      arity(2);
      return map2(args[0], args[1], [](D y, D x) { return std::atan2(y, x); });
    }
    if (f == "hypot") {
      arity(2);
      return map2(args[0], args[1], [](D x, D y) { return std::hypot(x, y); });
    }
    if (f == "min" || f == "max") {
      auto xs = reduce_args(f, args);
      return f == "min" ? *std::min_element(xs.begin(), xs.end()) : *std::max_element(xs.begin(), xs.end());
    }
    if (f == "sum" || f == "mean") {
      arity(1);
      auto xs = reduce_args(f, args);
      double s = 0;
      for (double x : xs) s += x;
      return f == "sum" ? s : s / static_cast<double>(xs.size());
    }
    if (f == "norm") {
      arity(1);
      auto xs = reduce_args(f, args);
      double s = 0;
      for (double x : xs) s += x * x;
      return std::sqrt(s);
    }
    if (f == "dot") {
      arity(2);
      std::vector<double> a, b;
      flatten(args[0], a);
      flatten(args[1], b);
      if (a.size() != b.size()) throw InterpError("dot() operands differ in length");
      double s = 0;
      for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
      return s;
    }
    if (f == "len") {
      arity(1);
      return static_cast<double>(length(args[0]));
    }
    if (f == "round") {
      if (args.size() == 1) return map1(args[0], [](D x) { return std::nearbyint(x); });
      arity(2);
      const double scale = std::pow(10.0, num(args[1], "round digits"));
      return map1(args[0], [scale](D x) { return std::nearbyint(x * scale) / scale; });
    }
    if (f == "int") {
      arity(1);
      return map1(args[0], [](D x) { return std::trunc(x); });
    }
    if (f == "float" || f == "array" || f == "asarray" || f == "list") {
      arity(1);
      return args[0];
    }
    if (f == "str") {
      arity(1);
      return format_value(args[0]);
    }
    if (f == "print") {
      for (std::size_t i = 0; i < args.size(); ++i) out += (i ? " " : "") + format_value(args[i]);
      out += "\n";
      return Value();
    }
    throw InterpError("name '" + f + "' is not defined");
  }

  const ValueMap& env_;
  std::map<std::string, Value> locals_;
  ValueMap assigned_;
  std::size_t budget_;
  std::size_t steps_ = 0;
};

}  // namespace detail

/// Runs `code` against a read-only snapshot of session variables. Failures are
/// reported in `err` with no result; they never throw.
inline Outcome run(std::string_view code, bool exec_mode, const ValueMap& env,
                   std::size_t budget = kDefaultStepBudget) {
  Outcome o;
  if (code.size() > kMaxCodeBytes) {
    o.err = "code exceeds " + std::to_string(kMaxCodeBytes) + " bytes";
    return o;
  }
  detail::Machine m(env, budget);
  try {
    detail::Parser p(detail::tokenize(code));
    if (exec_mode) {
      auto prog = p.program();
      Value last;
      for (std::size_t i = 0; i < prog.size(); ++i) {
        Value v = m.eval(*prog[i]);
        last = (prog[i]->kind == detail::Kind::Assign || prog[i]->kind == detail::Kind::Import) ? Value() : v;
      }
      if (!last.is_null()) o.result = last;
      o.assigned = m.assigned();
    } else {
      auto e = p.single_expression();
      Value v = m.eval(*e);
      if (!v.is_null()) o.result = v;
    }
  } catch (const InterpError& e) {
    o.err = e.what();
    o.result.reset();
    o.assigned.clear();
  } catch (const BadArgs& e) {
    o.err = e.what();
    o.result.reset();
    o.assigned.clear();
  }
  o.out = m.out;
  return o;
}

}  // namespace toolshed::interp
