#include "aov/schema.hpp"

#include <gtest/gtest.h>

namespace {

using nlohmann::json;

TEST(Schema, TypeChecks) {
  EXPECT_TRUE(aov::validate_schema(json{{"type", "string"}}, json("hi")).empty());
  EXPECT_FALSE(aov::validate_schema(json{{"type", "string"}}, json(3)).empty());
  EXPECT_TRUE(aov::validate_schema(json{{"type", "integer"}}, json(3)).empty());
  EXPECT_FALSE(aov::validate_schema(json{{"type", "integer"}}, json(3.5)).empty());
  EXPECT_TRUE(aov::validate_schema(json{{"type", "number"}}, json(3)).empty());
  EXPECT_TRUE(aov::validate_schema(json{{"type", "number"}}, json(3.5)).empty());
  EXPECT_TRUE(aov::validate_schema(json{{"type", "boolean"}}, json(true)).empty());
  EXPECT_TRUE(aov::validate_schema(json{{"type", "array"}}, json::array()).empty());
  EXPECT_TRUE(aov::validate_schema(json{{"type", "object"}}, json::object()).empty());
  EXPECT_THROW(aov::validate_schema(json{{"type", "wibble"}}, json(1)), aov::UsageError);
}

TEST(Schema, RequiredAndProperties) {
  json schema = {{"type", "object"},
                 {"required", {"a", "b"}},
                 {"properties", {{"a", {{"type", "integer"}}}, {"b", {{"type", "string"}}}}}};
  EXPECT_TRUE(aov::validate_schema(schema, json{{"a", 1}, {"b", "x"}}).empty());
  auto errs = aov::validate_schema(schema, json{{"a", 1}});
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_NE(errs[0].find("\"b\""), std::string::npos);
  errs = aov::validate_schema(schema, json{{"a", "wrong"}, {"b", "x"}});
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_NE(errs[0].find("$.a"), std::string::npos);
}

TEST(Schema, ItemsValidateEveryElement) {
  json schema = {{"type", "array"}, {"items", {{"type", "number"}, {"minimum", 0}}}};
  EXPECT_TRUE(aov::validate_schema(schema, json{0.1, 2, 3.5}).empty());
  auto errs = aov::validate_schema(schema, json{0.1, -2, "x"});
  EXPECT_EQ(errs.size(), 2u);
  EXPECT_NE(errs[0].find("[1]"), std::string::npos);
}

TEST(Schema, MinimumMaximumBounds) {
  json schema = {{"type", "number"}, {"minimum", 0}, {"maximum", 1}};
  EXPECT_TRUE(aov::validate_schema(schema, json(0.0)).empty());
  EXPECT_TRUE(aov::validate_schema(schema, json(1.0)).empty());
  EXPECT_FALSE(aov::validate_schema(schema, json(-0.01)).empty());
  EXPECT_FALSE(aov::validate_schema(schema, json(1.01)).empty());
}

TEST(Schema, EnumMembership) {
  json schema = {{"enum", {"highly", "moderately", "slightly"}}};
  EXPECT_TRUE(aov::validate_schema(schema, json("highly")).empty());
  EXPECT_FALSE(aov::validate_schema(schema, json("very")).empty());
}

TEST(Schema, NestedPathsInErrors) {
  json schema = {{"type", "object"},
                 {"properties",
                  {{"rows",
                    {{"type", "array"},
                     {"items",
                      {{"type", "object"},
                       {"required", {"id"}},
                       {"properties", {{"id", {{"type", "integer"}}}}}}}}}}}};
  json doc = {{"rows", {{{"id", 1}}, {{"noid", 2}}}}};
  auto errs = aov::validate_schema(schema, doc);
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_NE(errs[0].find("$.rows[1]"), std::string::npos);
}

TEST(Schema, ShippedReportSchemaAcceptsWellFormedReport) {
  auto schema = aov::load_json_file(std::string(SCHEMA_DIR) + "/report.schema.json");
  json report = {{"auroc", 0.97},
                 {"per_class", {{{"class", 0}, {"auroc", 1.0}}, {{"class", 1}, {"auroc", 0.94}}}},
                 {"loss_curve", {0.7, 0.5, 0.2}},
                 {"epochs",
                  {{{"mean_loss", 0.5}, {"train_auroc", 0.9}, {"val_auroc", 0.95}},
                   {{"mean_loss", 0.2}, {"train_auroc", 0.99}, {"val_auroc", 0.97}}}},
                 {"n_images", 1000},
                 {"seed", 7},
                 {"maps", {"maps/map0.pgm"}},
                 {"wall_time_s", 12.5},
                 {"checkpoint", "ckpt.aovc"}};
  auto errs = aov::validate_schema(schema, report);
  EXPECT_TRUE(errs.empty()) << (errs.empty() ? "" : errs[0]);

  report["auroc"] = 1.5;
  report.erase("seed");
  errs = aov::validate_schema(schema, report);
  EXPECT_EQ(errs.size(), 2u);
}

TEST(Schema, MissingFileRejected) {
  EXPECT_THROW(aov::load_json_file("/nonexistent/schema.json"), aov::DataError);
}

}  // namespace
