import { mountStudio } from "./app.js";

const root = document.getElementById("app");
if (root) {
  const app = mountStudio(root);
  void app.init();
}
