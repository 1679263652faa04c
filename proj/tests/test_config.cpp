#include <doctest.h>

#include <cmath>
#include <cstdlib>

#include "rq/config.hpp"
#include "rq/error.hpp"

using namespace rq;

TEST_SUITE("config") {

TEST_CASE("key value parsing") {
    const auto kv = KeyValueConfig::parse("# comment\n a = 1 \nb=two words\n\nc = 2.5\na = 3\n");
    CHECK(kv.get_int("a", 0) == 3);
    CHECK(kv.get_or("b", "") == "two words");
    CHECK(kv.get_double("c", 0.0) == 2.5);
    CHECK(kv.get_double("missing", 7.0) == 7.0);
    CHECK_FALSE(kv.get("missing").has_value());
    CHECK(kv.unknown_keys({"a", "c"}) == std::vector<std::string>{"b"});
}

TEST_CASE("malformed config lines") {
    try {
        KeyValueConfig::parse("a = 1\nbogus\n");
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(e.line() == 2);
    }
    CHECK_THROWS_AS(KeyValueConfig::parse(" = 4\n"), IoError);
    const auto kv = KeyValueConfig::parse("x = abc\ny = 1.5\n");
    CHECK_THROWS_AS(kv.get_double("x", 0.0), ConfigError);
    CHECK_THROWS_AS(kv.get_int("y", 0), ConfigError);
}

TEST_CASE("render round trip") {
    KeyValueConfig kv;
    kv.set("alpha", "1");
    kv.set("beta", "x y");
    const auto back = KeyValueConfig::parse(kv.render());
    CHECK(back.entries() == kv.entries());
}

TEST_CASE("shortest round-trip numbers") {
    CHECK(format_number(30.4) == "30.4");
    CHECK(format_number(1e-3) == "0.001");
    CHECK(format_number(2.0) == "2");
    for (double v : {0.1, 1.0 / 3.0, 2943.0400758, -1e-300, 12345678.901234567}) {
        CHECK(std::strtod(format_number(v).c_str(), nullptr) == v);
    }
}

}
