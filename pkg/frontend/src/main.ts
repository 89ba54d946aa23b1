import { ApiClient } from "./api.js";
import { createStudio } from "./app.js";

document.addEventListener("DOMContentLoaded", () => {
  const root = document.getElementById("studio");
  if (!root) throw new Error("missing #studio mount point");
  createStudio(root, {
    api: new ApiClient(""),
    storage: window.localStorage,
    healthIntervalMs: 5000,
  });
});
