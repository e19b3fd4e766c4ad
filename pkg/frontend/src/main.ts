import { ReviewApp } from "./ui.js";

const root = document.getElementById("app");
if (!root) {
  throw new Error("missing #app mount point");
}

const app = new ReviewApp({
  root,
  baseUrl: "", // same origin as the review service
  storage: window.localStorage,
});
app.renderLogin();
