// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "toolshed/interp.hpp"

namespace toolshed::interp {
namespace {

Value eval(std::string_view code, const ValueMap& env = {}) {
  auto o = run(code, false, env);
  EXPECT_EQ(o.err, "") << code;
  return o.result.value_or(Value());
}

TEST(Interp, Arithmetic) {
  EXPECT_EQ(eval("1+2*3"), Value(7.0));
  EXPECT_EQ(eval("(1+2)*3"), Value(9.0));
  EXPECT_EQ(eval("2**10"), Value(1024.0));
  EXPECT_EQ(eval("-2**2"), Value(-4.0));
  EXPECT_EQ(eval("7 % 3"), Value(1.0));
  EXPECT_EQ(eval("7 // 2"), Value(3.0));
  EXPECT_EQ(eval("1e-3 * 1000"), Value(1.0));
  EXPECT_EQ(eval("sqrt(16) + abs(-1)"), Value(5.0));
  EXPECT_EQ(eval("math.sqrt(9)"), Value(3.0));
  EXPECT_EQ(eval("np.mean([1, 2, 3])"), Value(2.0));
}

TEST(Interp, ListsAndBroadcast) {
  EXPECT_EQ(eval("[1, 2] * 2"), Value(Value::List{2.0, 4.0}));
  EXPECT_EQ(eval("[1, 2] + [10, 20]"), Value(Value::List{11.0, 22.0}));
  EXPECT_EQ(eval("norm([3, 4])"), Value(5.0));
  EXPECT_EQ(eval("dot([1, 2], [3, 4])"), Value(11.0));
  EXPECT_EQ(eval("[[1, 2], [3, 4]][1][0]"), Value(3.0));
  EXPECT_EQ(eval("[[1, 2], [3, 4]][1, 1]"), Value(4.0));
  EXPECT_EQ(eval("[5, 6, 7][-1]"), Value(7.0));
  EXPECT_EQ(eval("len([5, 6, 7])"), Value(3.0));
  EXPECT_EQ(eval("max([4, 9, 2])"), Value(9.0));
}

TEST(Interp, ComparisonsAndLogic) {
  EXPECT_EQ(eval("1 < 2 and not 3 == 4"), Value(true));
  EXPECT_EQ(eval("1 > 2 or False"), Value(false));
  EXPECT_EQ(eval("'a' == 'a'"), Value(true));
}

TEST(Interp, EnvironmentLookup) {
  ValueMap env{{"d", Value(2.5)}, {"cup_detection", Value(Point2{0.25, 0.75})}};
  EXPECT_EQ(eval("d * 2", env), Value(5.0));
  EXPECT_EQ(eval("cup_detection[1]", env), Value(0.75));
  EXPECT_NEAR(eval("pi", env).as_number(), 3.141592653589793, 1e-15);
}

TEST(Interp, ExecAssignsAndReturnsLastExpression) {
  auto o = run("d = norm([3,4])\ne = d + 1\ne * 2", true, {});
  EXPECT_EQ(o.err, "");
  ASSERT_TRUE(o.result);
  EXPECT_EQ(*o.result, Value(12.0));
  EXPECT_EQ(o.assigned.at("d"), Value(5.0));
  EXPECT_EQ(o.assigned.at("e"), Value(6.0));

  auto only_assign = run("import numpy as np; d = np.sqrt(2)", true, {});
  EXPECT_EQ(only_assign.err, "");
  EXPECT_FALSE(only_assign.result);
  EXPECT_NEAR(only_assign.assigned.at("d").as_number(), std::sqrt(2.0), 1e-15);
}

TEST(Interp, PrintGoesToStdout) {
  auto o = run("print(1 + 1)\nprint('x', 3)", true, {});
  EXPECT_EQ(o.out, "2\nx 3\n");
}

TEST(Interp, ErrorsAreReportedNotThrown) {
  for (const char* bad : {"1 / 0", "undefined_name + 1", "[1, 2][5]", "1 +", "sqrt('a')", "open('f')"}) {
    auto o = run(bad, false, {});
    EXPECT_FALSE(o.result) << bad;
    EXPECT_NE(o.err, "") << bad;
  }
  auto partial = run("a = 1\nb = a / 0", true, {});
  EXPECT_NE(partial.err, "");
  EXPECT_TRUE(partial.assigned.empty());
}

TEST(Interp, StepBudgetAndSizeLimit) {
  auto o = run("1+2+3+4+5+6+7+8", false, {}, 3);
  EXPECT_NE(o.err.find("budget"), std::string::npos) << o.err;
  auto big = run(std::string(kMaxCodeBytes + 1, ' '), true, {});
  EXPECT_NE(big.err, "");
}

TEST(Interp, FormatNumber) {
  EXPECT_EQ(format_number(7.0), "7");
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(-2.5), "-2.5");
  EXPECT_EQ(format_value(Value(Value::List{1.0, Value(true), Value("s")})), "[1, True, s]");
}

}  // namespace
}  // namespace toolshed::interp
