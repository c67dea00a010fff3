// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "toolshed/value.hpp"

namespace toolshed {

/// Thrown when an argument references a variable the session does not hold.
class UnknownVariable : public BadArgs {
 public:
  explicit UnknownVariable(std::string name)
      : BadArgs("unknown variable: " + name), name_(std::move(name)) {}
  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

namespace resolve_detail {

inline Value resolve_value(const Value& v, const ValueMap& store) {
  if (v.is_ref()) {
    const auto& name = v.as_ref().name;
    auto it = store.find(name);
    if (it == store.end()) throw UnknownVariable(name);
    return it->second;
  }
  if (v.is_list()) {
    Value::List out;
    out.reserve(v.as_list().size());
    for (const auto& e : v.as_list()) out.push_back(resolve_value(e, store));
    return out;
  }
  return v;
}

}  // namespace resolve_detail

/// Replaces every VariableRef (at any depth) with the stored value.
inline ValueMap resolve_arguments(const ValueMap& args, const ValueMap& store) {
  ValueMap out;
  for (const auto& [k, v] : args) out.emplace(k, resolve_detail::resolve_value(v, store));
  return out;
}

}  // namespace toolshed
